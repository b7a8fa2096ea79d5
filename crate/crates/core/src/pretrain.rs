//! Supervised RGB pretraining of the teacher model on synthetic labeled
//! sequences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, extract_traced, Arch};
use crate::bbe::{bbe_loss, BbeItem};
use crate::data::{FrameSource, InMemorySequence};
use crate::error::{Error, Result};
use crate::examples::{center_label, labeled_example, Example, Jitter};
use crate::geometry::encode_box_state;
use crate::model::{HeadConfig, Model};
use crate::params::{add_into, scale_all, Group, GroupSet, Optimizer, OptimizerKind};
use crate::tcl::{tcl_loss, TclItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub arch: Arch,
    pub heads: HeadConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Final-epoch loss that counts as converged.
    pub loss_threshold: f64,
    /// Frame pairs drawn from the training sequences.
    pub n_examples: usize,
    /// Largest frame gap between reference and test frames.
    pub max_gap: usize,
    pub jitter: Jitter,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::default(),
            heads: HeadConfig::default(),
            epochs: 30,
            batch_size: 8,
            lr: 2e-3,
            lambda: 1.0,
            loss_threshold: 1.0,
            n_examples: 1000,
            max_gap: 8,
            jitter: Jitter::default(),
            seed: 0,
        }
    }
}

/// Pretrained RGB model with its per-epoch loss trace.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub model: Model,
    pub trace: Vec<f64>,
}

/// Reference/test frame pairs from annotated sequences.
pub fn pretrain_examples(seqs: &[InMemorySequence], cfg: &PretrainConfig) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6574);
    let mut out = Vec::with_capacity(cfg.n_examples);
    if seqs.is_empty() {
        return Ok(out);
    }
    for _ in 0..cfg.n_examples {
        let s = &seqs[rng.random_range(0..seqs.len())];
        let n = s.len();
        let i = rng.random_range(0..n);
        let lo = i.saturating_sub(cfg.max_gap);
        let hi = (i + cfg.max_gap).min(n - 1);
        let j = rng.random_range(lo..=hi);
        out.push(labeled_example(&s.frame(i)?, &s.gt[i], &s.frame(j)?, &s.gt[j], cfg.jitter, &mut rng));
    }
    Ok(out)
}

/// One supervised step over `batch`; returns the combined loss and applies
/// the update.
fn step(model: &mut Model, opt: &mut Optimizer, batch: &[&Example], cfg: &PretrainConfig) -> Result<f64> {
    let traced: Vec<_> = batch
        .iter()
        .map(|ex| (extract_traced(&model.backbone, &ex.reference.rgb), extract_traced(&model.backbone, &ex.test.rgb)))
        .collect();
    let mut labels = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (ex, (_, (test, _))) in batch.iter().zip(&traced) {
        labels.push(center_label(&ex.test.bbox, test)?);
        targets.push(encode_box_state(&ex.test.bbox)?);
    }
    let heads = GroupSet::from_groups(&Group::HEADS);
    let tcl_items: Vec<TclItem> = batch
        .iter()
        .zip(&traced)
        .zip(&labels)
        .map(|((ex, ((r, _), (t, _))), g)| TclItem { reference: r, roi: ex.reference.bbox, test: t, label: g, trainable: heads })
        .collect();
    let bbe_items: Vec<BbeItem> = batch
        .iter()
        .zip(&traced)
        .zip(&targets)
        .map(|((ex, ((r, _), (t, _))), s)| BbeItem { reference: r, roi: ex.reference.bbox, test: t, target: *s, trainable: heads })
        .collect();
    let tcl = tcl_loss(&model.tcl, &tcl_items, true)?;
    let bbe = bbe_loss(&model.bbe, &bbe_items, true)?;
    let loss = tcl.loss + cfg.lambda * bbe.loss;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let mut grads = tcl.grads;
    let mut gb = bbe.grads;
    scale_all(&mut gb, cfg.lambda);
    add_into(&mut grads, &gb);
    let mut g_backbone = vec![0.0; model.backbone.values.len()];
    for (i, ((_, rt), (_, tt))) in traced.iter().enumerate() {
        let (ti, bi) = (&tcl.items[i], &bbe.items[i]);
        let mut d_ref = ti.d_reference.clone().unwrap();
        for (a, b) in d_ref.data.iter_mut().zip(&bi.d_reference.as_ref().unwrap().data) {
            *a += cfg.lambda * b;
        }
        let mut d_test = ti.d_test.clone().unwrap();
        for (a, b) in d_test.data.iter_mut().zip(&bi.d_test.as_ref().unwrap().data) {
            *a += cfg.lambda * b;
        }
        backbone::backward(&model.backbone, rt, &d_ref, &mut g_backbone);
        backbone::backward(&model.backbone, tt, &d_test, &mut g_backbone);
    }
    grads.insert(Group::Backbone, g_backbone);
    let lr = cfg.lr;
    opt.step(&mut model.groups_mut(), &grads, |_| lr);
    Ok(loss)
}

/// Trains backbone and both heads on RGB examples with Adam. The returned
/// backbone is rounded to f32 so its checkpoint is exact. Fails with the
/// loss trace if the last epoch's loss is above the threshold.
pub fn pretrain_rgb(examples: &[Example], cfg: &PretrainConfig) -> Result<Teacher> {
    if examples.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidParameter { name: "examples", reason: "need at least one example and batch".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg.arch.clone(), &cfg.heads, &mut rng);
    let mut opt = Optimizer::new(OptimizerKind::adam());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 * 0x9e37_79b9)));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let loss = step(&mut model, &mut opt, &batch, cfg)?;
            if !loss.is_finite() {
                trace.push(loss);
                return Err(Error::TrainingFailed { trace });
            }
            total += loss;
            steps += 1;
        }
        trace.push(total / steps as f64);
    }
    model.backbone.round_to_f32();
    match trace.last() {
        Some(&l) if l <= cfg.loss_threshold => Ok(Teacher { model, trace }),
        _ => Err(Error::TrainingFailed { trace }),
    }
}
