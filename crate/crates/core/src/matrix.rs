//! Desk-scale pipeline: synthetic data, the RGB teacher, every training
//! setting, and held-out thermal evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain_rgb, PretrainConfig, Teacher};
use crate::data::{generate_sequences, generate_synthetic_pairs, simulate_detections, AlignedPair, InMemorySequence, SeqSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{build_report, evaluate_sequence, Aggregation, EvalReport, Scores};
use crate::model::Model;
use crate::patchgen::samples_for;
use crate::pretrain::pretrain_examples;
use crate::tracker::{run_sequence, TrackerConfig};
use crate::trainer::{config_from_setting, joint_init, recombine_branches, train, DistillConfig, Setting, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskPreset {
    /// Unlabeled aligned pairs for distillation.
    pub pairs: SynthSpec,
    /// Relative jitter of the simulated RGB detector.
    pub detection_jitter: f64,
    /// Labeled RGB sequences for the teacher.
    pub train_sequences: SeqSpec,
    /// Held-out thermal sequences.
    pub eval_sequences: SeqSpec,
    pub pretrain: PretrainConfig,
    pub tracker: TrackerConfig,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DeskPreset {
    fn default() -> Self {
        Self {
            pairs: SynthSpec::default(),
            detection_jitter: 0.1,
            train_sequences: SeqSpec { n_sequences: 100, thermal: false, ..SeqSpec::default() },
            eval_sequences: SeqSpec::default(),
            pretrain: PretrainConfig::default(),
            tracker: TrackerConfig::default(),
            epochs: 50,
            seed: 0,
        }
        .with_seed(0)
    }
}

impl DeskPreset {
    /// Derives every stage's seed from `seed`; the three data streams never
    /// share a seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pairs.seed = seed;
        self.train_sequences.seed = seed.wrapping_add(1);
        self.eval_sequences.seed = seed.wrapping_add(1000);
        self.pretrain.seed = seed;
        self
    }
}

/// Aligned pairs with simulated detections attached.
pub fn desk_pairs(spec: &SynthSpec, detection_jitter: f64) -> Result<Vec<AlignedPair>> {
    let raw = generate_synthetic_pairs(spec);
    let objects: Vec<_> = raw.iter().map(|p| p.object).collect();
    let dets = simulate_detections(&objects, detection_jitter, spec.seed ^ 0x6465_7465);
    raw.into_iter().zip(dets).enumerate().map(|(i, (p, d))| AlignedPair::new(i, p.rgb, p.tir, Some(vec![d]))).collect()
}

pub fn build_teacher(preset: &DeskPreset) -> Result<Teacher> {
    let seqs = generate_sequences(&preset.train_sequences);
    let examples = pretrain_examples(&seqs, &preset.pretrain)?;
    pretrain_rgb(&examples, &preset.pretrain)
}

/// OPE of `model` over `seqs`.
pub fn evaluate_model(model: &Model, cfg: &TrackerConfig, seqs: &[InMemorySequence], mode: Aggregation) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(seqs.len());
    for s in seqs {
        let boxes = run_sequence(model, cfg, s, &s.gt[0])?;
        results.push(evaluate_sequence(&s.name, &s.attributes, &boxes, &s.gt)?);
    }
    Ok(build_report(&results, mode))
}

/// Modalities on the reference and test branches, with `(ft)` marking a
/// fine-tuned branch.
pub fn branch_labels(setting: Setting) -> (&'static str, &'static str) {
    match setting {
        Setting::A1 => ("RGB", "RGB"),
        Setting::B1 | Setting::C1 | Setting::D2 => ("TIR(ft)", "RGB"),
        Setting::B2 | Setting::D1 => ("RGB", "TIR(ft)"),
        Setting::B3 => ("TIR", "TIR"),
        Setting::D3 | Setting::D4 | Setting::D5 | Setting::BbeOnly => ("RGB-TIR(ft)", "TIR-RGB(ft)"),
    }
}

/// Desk configuration of a setting; the seed is derived from the root seed
/// and the setting's index.
pub fn desk_config(setting: Setting, preset: &DeskPreset) -> DistillConfig {
    let mut c = config_from_setting(setting.as_str()).expect("every setting has a canonical config").desk();
    c.epochs = preset.epochs;
    let idx = Setting::ALL.iter().position(|&s| s == setting).unwrap() as u64;
    c.seed = preset.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(idx + 1);
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub setting: Setting,
    pub reference: String,
    pub test: String,
    pub scores: Option<Scores>,
    pub error: Option<String>,
}

/// Trains one distilled setting from `init` on the strategy's samples.
pub fn run_setting(config: &DistillConfig, init: &Model, pairs: &[AlignedPair]) -> Result<TrainState> {
    let samples = samples_for(pairs, config.patch_strategy, config.patch_size, config.seed)?;
    train(config, init, &samples)
}

/// Every setting in table order. A failed row keeps its error and any row
/// depending on it fails too; the rest still run.
pub fn reproduce_matrix(preset: &DeskPreset, teacher: &Model, pairs: &[AlignedPair]) -> Vec<MatrixRow> {
    let eval_seqs = generate_sequences(&preset.eval_sequences);
    let eval = |m: &Model| evaluate_model(m, &preset.tracker, &eval_seqs, Aggregation::SequenceAverage).map(|r| r.overall);
    let run = |s: Setting, init: &Model| run_setting(&desk_config(s, preset), init, pairs);

    let b1 = run(Setting::B1, teacher);
    let b2 = run(Setting::B2, teacher);
    let c1 = run(Setting::C1, teacher);
    let b3 = match (&b1, &b2) {
        (Ok(b1), Ok(b2)) => recombine_branches(b1, b2, teacher),
        _ => Err(Error::Upstream("B3 needs both B1 and B2".into())),
    };
    let joint = match (&b3, &c1) {
        (Ok(b3), Ok(c1)) => joint_init(b3, c1),
        _ => Err(Error::Upstream("joint settings need B3 and C1".into())),
    };

    Setting::ALL
        .iter()
        .map(|&s| {
            let model: Result<Model> = match s {
                Setting::A1 => Ok(teacher.clone()),
                Setting::B1 => b1.as_ref().map(|t| t.model.clone()).map_err(clone_err),
                Setting::B2 => b2.as_ref().map(|t| t.model.clone()).map_err(clone_err),
                Setting::B3 => b3.as_ref().cloned().map_err(clone_err),
                Setting::C1 => c1.as_ref().map(|t| t.model.clone()).map_err(clone_err),
                Setting::BbeOnly => run(s, teacher).map(|t| t.model),
                _ => joint.as_ref().map_err(clone_err).and_then(|init| run(s, init).map(|t| t.model)),
            };
            let (reference, test) = branch_labels(s);
            let (scores, error) = match model.and_then(|m| eval(&m)) {
                Ok(sc) => (Some(sc), None),
                Err(e) => (None, Some(e.to_string())),
            };
            MatrixRow { setting: s, reference: reference.into(), test: test.into(), scores, error }
        })
        .collect()
}

fn clone_err(e: &Error) -> Error {
    Error::Upstream(e.to_string())
}

/// `setting,reference,test,S,P,NP,error`; scores in percent with two
/// decimals, empty on failure.
pub fn matrix_csv(rows: &[MatrixRow]) -> String {
    let mut out = String::from("setting,reference,test,S,P,NP,error\n");
    for r in rows {
        write!(out, "{},{},{},", r.setting, r.reference, r.test).unwrap();
        match &r.scores {
            Some(s) => write!(out, "{:.2},{:.2},{:.2},", 100.0 * s.success, 100.0 * s.precision, 100.0 * s.norm_precision).unwrap(),
            None => out.push_str(",,,"),
        }
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        writeln!(out, "{err}").unwrap();
    }
    out
}

pub fn write_matrix(rows: &[MatrixRow], path: &Path) -> Result<()> {
    fs::write(path, matrix_csv(rows))?;
    Ok(())
}
