//! Cross-modal distillation: the setting matrix, the combined objective, the
//! training loop, branch recombination and checkpoints.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Reader;
use crate::bbe::{bbe_loss, BbeItem};
use crate::error::{Error, Result};
use crate::examples::{paired_example, CachedExample, Jitter};
use crate::model::{get_f64s, model_to_bytes, put_f64s, put_str, read_model, Model};
use crate::params::{add_into, scale_all, Branch, Group, GroupSet, Optimizer, OptimizerKind};
use crate::patchgen::{assign_slots, BatchLayout, Mixing, PairedSample, Strategy};
use crate::tcl::{tcl_loss, TclItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    A1,
    B1,
    B2,
    B3,
    C1,
    D1,
    D2,
    D3,
    D4,
    D5,
    #[serde(rename = "BBE_ONLY")]
    BbeOnly,
}

impl Setting {
    pub const ALL: [Setting; 11] = [
        Setting::A1,
        Setting::B1,
        Setting::B2,
        Setting::B3,
        Setting::C1,
        Setting::D1,
        Setting::D2,
        Setting::D3,
        Setting::D4,
        Setting::D5,
        Setting::BbeOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::A1 => "A1",
            Setting::B1 => "B1",
            Setting::B2 => "B2",
            Setting::B3 => "B3",
            Setting::C1 => "C1",
            Setting::D1 => "D1",
            Setting::D2 => "D2",
            Setting::D3 => "D3",
            Setting::D4 => "D4",
            Setting::D5 => "D5",
            Setting::BbeOnly => "BBE_ONLY",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownSetting(s.to_string()))
    }

    /// D rows start from the B3 + C1 combination.
    pub fn is_joint(self) -> bool {
        matches!(self, Setting::D1 | Setting::D2 | Setting::D3 | Setting::D4 | Setting::D5)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    None,
    Reference,
    Test,
    Both,
    /// Not trained directly; assembled from two other runs.
    BothViaRecombination,
}

impl Trainable {
    fn branches(self) -> &'static [Branch] {
        match self {
            Trainable::None | Trainable::BothViaRecombination => &[],
            Trainable::Reference => &[Branch::Reference],
            Trainable::Test => &[Branch::Test],
            Trainable::Both => &[Branch::Reference, Branch::Test],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Trainable::None,
            "reference" => Trainable::Reference,
            "test" => Trainable::Test,
            "both" => Trainable::Both,
            "both_via_recombination" => Trainable::BothViaRecombination,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Trainable::None => "none",
            Trainable::Reference => "reference",
            Trainable::Test => "test",
            Trainable::Both => "both",
            Trainable::BothViaRecombination => "both_via_recombination",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub setting: Setting,
    pub patch_strategy: Strategy,
    pub batch_mixing: BatchLayout,
    pub tcl_trainable: Trainable,
    pub bbe_trainable: Trainable,
    pub lr_tcl: f64,
    pub lr_bbe: f64,
    /// Common multiplier on both rates; 1 for the published rates.
    pub lr_scale: f64,
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    pub seed: u64,
    /// Side of the center-area patch.
    pub patch_size: u32,
    /// Jittered test views per paired sample in the training pool.
    pub views_per_sample: usize,
    pub jitter: Jitter,
    /// Explicit overrides applied on top of the canonical setting.
    pub overrides: Vec<String>,
}

/// Canonical configuration of a Table-1 setting at published scale.
pub fn config_from_setting(name: &str) -> Result<DistillConfig> {
    let setting = Setting::parse(name)?;
    use Trainable::*;
    let (mixing, concat, tcl, bbe) = match setting {
        Setting::A1 => (Mixing::RefRgb, false, None, None),
        Setting::B1 => (Mixing::RefTir, false, None, Reference),
        Setting::B2 => (Mixing::RefRgb, false, None, Test),
        Setting::B3 => (Mixing::RefTir, false, None, BothViaRecombination),
        Setting::C1 => (Mixing::RefTir, false, Reference, None),
        Setting::D1 => (Mixing::RefRgb, false, Test, Test),
        Setting::D2 => (Mixing::RefTir, false, Reference, Reference),
        Setting::D3 | Setting::D4 | Setting::D5 => (Mixing::Mixed, true, Both, Both),
        Setting::BbeOnly => (Mixing::Mixed, true, None, Both),
    };
    let patch_strategy = match setting {
        Setting::D4 => Strategy::RandomSampling,
        Setting::D5 => Strategy::Detection,
        _ => Strategy::CenterArea,
    };
    let (lr_tcl, lr_bbe) = match setting {
        s if s.uses_joint_rates() => (2e-8, 1e-7),
        _ => (1e-6, 1e-6),
    };
    Ok(DistillConfig {
        setting,
        patch_strategy,
        batch_mixing: BatchLayout { mixing, concat_horizontal: concat },
        tcl_trainable: tcl,
        bbe_trainable: bbe,
        lr_tcl,
        lr_bbe,
        lr_scale: 1.0,
        lambda: 1.0,
        mu: crate::tcl::DEFAULT_MU,
        nu: crate::bbe::DEFAULT_NU,
        epochs: 50,
        batch_size: 5,
        samples_per_epoch: 26_000,
        lr_decay_factor: 0.5,
        lr_decay_period: 15,
        seed: 0,
        patch_size: 96,
        views_per_sample: 4,
        jitter: Jitter::default(),
        overrides: Vec::new(),
    })
}

/// Desk-scale learning-rate multipliers for the joint settings and for the
/// single-branch settings. Ratios within a family are kept; one shared
/// multiplier either stalls the joint settings or wrecks the teacher in the
/// single-branch ones.
pub const DESK_LR_SCALE_JOINT: f64 = 2e4;
pub const DESK_LR_SCALE_BRANCH: f64 = 1e2;

impl Setting {
    /// Settings trained with the smaller joint-learning rates.
    pub fn uses_joint_rates(self) -> bool {
        self.is_joint() || self == Setting::BbeOnly
    }
}

impl DistillConfig {
    /// Desk-scale preset: same structure, fewer samples, scaled rates.
    pub fn desk(mut self) -> Self {
        self.samples_per_epoch = 200;
        self.lr_scale = if self.setting.uses_joint_rates() { DESK_LR_SCALE_JOINT } else { DESK_LR_SCALE_BRANCH };
        self
    }

    /// Groups the optimizer may touch in this setting.
    pub fn trainable_groups(&self) -> GroupSet {
        let mut s = GroupSet::EMPTY;
        for b in self.tcl_trainable.branches() {
            s.insert(match b {
                Branch::Reference => Group::TclReference,
                Branch::Test => Group::TclTest,
            });
        }
        for b in self.bbe_trainable.branches() {
            s.insert(match b {
                Branch::Reference => Group::BbeReference,
                Branch::Test => Group::BbeTest,
            });
        }
        s
    }

    pub fn tcl_active(&self) -> bool {
        !self.tcl_trainable.branches().is_empty()
    }

    pub fn bbe_active(&self) -> bool {
        !self.bbe_trainable.branches().is_empty()
    }

    /// Step size for `group` during `epoch` (1-based).
    pub fn lr_at(&self, group: Group, epoch: usize) -> f64 {
        let base = if group.is_tcl() { self.lr_tcl } else { self.lr_bbe };
        let period = self.lr_decay_period.max(1);
        base * self.lr_scale * self.lr_decay_factor.powi(((epoch.max(1) - 1) / period) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| Err(Error::InvalidParameter { name, reason: reason.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.views_per_sample == 0 {
            return bad("views_per_sample", "must be positive");
        }
        if !(self.lambda >= 0.0 && self.mu >= 0.0 && self.nu >= 0.0) {
            return bad("lambda/mu/nu", "must be non-negative");
        }
        Ok(())
    }
}

/// `L = L_TCL + lambda * L_BBE`.
pub fn combined_loss(config: &DistillConfig, l_tcl: f64, l_bbe: f64) -> f64 {
    l_tcl + config.lambda * l_bbe
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_tcl: f64,
    pub l_bbe: f64,
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: DistillConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLoss>,
}

impl TrainState {
    pub fn new(config: DistillConfig, init: &Model) -> Self {
        let mut model = init.clone();
        model.tcl.mu = config.mu;
        model.bbe.nu = config.nu;
        Self { config, model, optimizer: Optimizer::new(OptimizerKind::Sgd), epoch: 0, history: Vec::new() }
    }
}

/// Fixed pool of jittered examples with cached features.
pub struct Pool {
    pub items: Vec<CachedExample>,
}

impl Pool {
    pub fn build(config: &DistillConfig, model: &Model, samples: &[PairedSample]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x706f_6f6c);
        let concat = config.batch_mixing.concat_horizontal;
        let mut items = Vec::with_capacity(samples.len() * config.views_per_sample);
        for s in samples {
            for _ in 0..config.views_per_sample {
                let ex = paired_example(s, config.jitter, &mut rng);
                items.push(CachedExample::build(&model.backbone, &ex, concat)?);
            }
        }
        Ok(Self { items })
    }
}

/// Pool indices visited in `epoch`: consecutive seeded shuffles of the pool,
/// truncated to `samples_per_epoch`. Depends only on seed and epoch.
pub fn epoch_order(seed: u64, epoch: usize, pool_len: usize, samples_per_epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut out = Vec::with_capacity(samples_per_epoch);
    while out.len() < samples_per_epoch && pool_len > 0 {
        let mut perm: Vec<usize> = (0..pool_len).collect();
        perm.shuffle(&mut rng);
        let take = (samples_per_epoch - out.len()).min(pool_len);
        out.extend_from_slice(&perm[..take]);
    }
    out
}

pub struct StepLoss {
    pub l_tcl: f64,
    pub l_bbe: f64,
    pub l: f64,
}

/// One optimizer step on the examples `indices` of the pool.
pub fn train_step(state: &mut TrainState, pool: &Pool, indices: &[usize], epoch: usize) -> Result<StepLoss> {
    let cfg = &state.config;
    let slots: Vec<usize> = match cfg.batch_mixing.mixing {
        // each pair feeds both halves of the mixed batch
        Mixing::Mixed => indices.iter().chain(indices).copied().collect(),
        _ => indices.to_vec(),
    };
    let tags = assign_slots(slots.len(), &cfg.batch_mixing)?;
    let trainable = cfg.trainable_groups();
    let data: Vec<_> = slots.iter().zip(&tags).map(|(&i, t)| pool.items[i].slot(*t)).collect();

    let (mut l_tcl, mut l_bbe) = (0.0, 0.0);
    let mut grads = Default::default();
    if cfg.tcl_active() {
        let items: Vec<TclItem> = data
            .iter()
            .map(|d| TclItem { reference: &d.reference, roi: d.roi, test: &d.test, label: &d.label, trainable })
            .collect();
        let out = tcl_loss(&state.model.tcl, &items, false)?;
        l_tcl = out.loss;
        add_into(&mut grads, &out.grads);
    }
    if cfg.bbe_active() {
        let items: Vec<BbeItem> = data
            .iter()
            .map(|d| BbeItem { reference: &d.reference, roi: d.roi, test: d.bbe_view(), target: d.target, trainable })
            .collect();
        let mut out = bbe_loss(&state.model.bbe, &items, false)?;
        l_bbe = out.loss;
        scale_all(&mut out.grads, cfg.lambda);
        add_into(&mut grads, &out.grads);
    }
    let l = combined_loss(cfg, l_tcl, l_bbe);
    if !l.is_finite() {
        return Ok(StepLoss { l_tcl, l_bbe, l });
    }
    grads.retain(|g, _| trainable.contains(*g));
    let lr = |g: Group| cfg.lr_at(g, epoch);
    state.optimizer.step(&mut state.model.groups_mut(), &grads, lr);
    Ok(StepLoss { l_tcl, l_bbe, l })
}

/// Runs epochs `state.epoch + 1 ..= until` on a prebuilt pool.
pub fn train_epochs(state: &mut TrainState, pool: &Pool, until: usize) -> Result<()> {
    let bs = state.config.batch_size;
    while state.epoch < until {
        let epoch = state.epoch + 1;
        let order = epoch_order(state.config.seed, epoch, pool.items.len(), state.config.samples_per_epoch);
        let (mut t, mut b, mut l, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(bs).enumerate() {
            let before = state.clone();
            let s = train_step(state, pool, chunk, epoch)?;
            if !s.l.is_finite() || !state.model.is_finite() {
                return Err(Error::TrainingAborted { epoch, step, snapshot: Box::new(before) });
            }
            t += s.l_tcl;
            b += s.l_bbe;
            l += s.l;
            n += 1;
        }
        let k = n.max(1) as f64;
        state.history.push(EpochLoss { epoch, l_tcl: t / k, l_bbe: b / k, l: l / k });
        state.epoch = epoch;
    }
    Ok(())
}

/// Distills `init` on the paired samples for `config.epochs` epochs.
pub fn train(config: &DistillConfig, init: &Model, samples: &[PairedSample]) -> Result<TrainState> {
    config.validate()?;
    let mut state = TrainState::new(config.clone(), init);
    let pool = Pool::build(config, &state.model, samples)?;
    train_epochs(&mut state, &pool, config.epochs)?;
    Ok(state)
}

/// Continues a saved run up to `config.epochs`.
pub fn resume(mut state: TrainState, samples: &[PairedSample]) -> Result<TrainState> {
    let pool = Pool::build(&state.config, &state.model, samples)?;
    let until = state.config.epochs;
    train_epochs(&mut state, &pool, until)?;
    Ok(state)
}

fn check_descriptor(expected: &Model, found: &Model) -> Result<()> {
    if expected.descriptor() != found.descriptor() {
        return Err(Error::Descriptor { expected: expected.descriptor(), found: found.descriptor() });
    }
    Ok(())
}

/// BBE reference branch from the B1 run, BBE test branch from the B2 run,
/// everything else from the teacher.
pub fn recombine_branches(b1: &TrainState, b2: &TrainState, teacher: &Model) -> Result<Model> {
    check_descriptor(teacher, &b1.model)?;
    check_descriptor(teacher, &b2.model)?;
    let mut m = teacher.clone();
    m.bbe.reference = b1.model.bbe.reference.clone();
    m.bbe.test = b2.model.bbe.test.clone();
    Ok(m)
}

/// Initialization of the joint rows: the B3 model with the TCL reference
/// branch taken from the C1 run.
pub fn joint_init(b3: &Model, c1: &TrainState) -> Result<Model> {
    check_descriptor(b3, &c1.model)?;
    let mut m = b3.clone();
    m.tcl.reference = c1.model.tcl.reference.clone();
    Ok(m)
}

const STATE_MAGIC: &[u8; 4] = b"TDTS";
pub const STATE_VERSION: u32 = 1;

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    put_str(&mut out, &serde_json::to_string(&state.config)?);
    out.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    out.extend_from_slice(&model_to_bytes(&state.model));
    put_str(&mut out, &serde_json::to_string(&state.optimizer.kind)?);
    out.extend_from_slice(&state.optimizer.steps.to_le_bytes());
    out.extend_from_slice(&(state.optimizer.moments.len() as u32).to_le_bytes());
    for (g, (m, v)) in &state.optimizer.moments {
        out.push(*g as u8);
        put_f64s(&mut out, m);
        put_f64s(&mut out, v);
    }
    let flat: Vec<f64> = state.history.iter().flat_map(|h| [h.epoch as f64, h.l_tcl, h.l_bbe, h.l]).collect();
    put_f64s(&mut out, &flat);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    if r.take(4)? != STATE_MAGIC {
        return Err(Error::Corrupt("not a training checkpoint".into()));
    }
    let version = r.u32()?;
    if version != STATE_VERSION {
        return Err(Error::Version { expected: STATE_VERSION, found: version });
    }
    let corrupt = |e: serde_json::Error| Error::Corrupt(e.to_string());
    let config: DistillConfig = serde_json::from_str(&r.string()?).map_err(corrupt)?;
    let epoch = r.u64()? as usize;
    let model = read_model(&mut r)?;
    let kind: OptimizerKind = serde_json::from_str(&r.string()?).map_err(corrupt)?;
    let mut optimizer = Optimizer::new(kind);
    optimizer.steps = r.u64()?;
    let n = r.u32()?;
    for _ in 0..n {
        let gi = r.take(1)?[0] as usize;
        let g = *Group::ALL.get(gi).ok_or_else(|| Error::Corrupt(format!("bad group {gi}")))?;
        let len = model.group(g).len();
        let m = get_f64s(&mut r, len, "moment")?;
        let v = get_f64s(&mut r, len, "moment")?;
        optimizer.moments.insert(g, (m, v));
    }
    let n_hist = r.u64()? as usize;
    if n_hist % 4 != 0 {
        return Err(Error::Corrupt("history length".into()));
    }
    let flat = (0..n_hist).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let history = flat.chunks(4).map(|c| EpochLoss { epoch: c[0] as usize, l_tcl: c[1], l_bbe: c[2], l: c[3] }).collect();
    if r.pos != buf.len() {
        return Err(Error::Corrupt("trailing bytes".into()));
    }
    Ok(TrainState { config, model, optimizer, epoch, history })
}

/// `epoch,L_TCL,L_BBE,L` with shortest round-trip floats.
pub fn write_loss_csv(history: &[EpochLoss], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,L_TCL,L_BBE,L")?;
    for h in history {
        writeln!(f, "{},{},{},{}", h.epoch, h.l_tcl, h.l_bbe, h.l)?;
    }
    Ok(())
}
