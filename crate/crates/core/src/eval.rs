//! Precision, normalized precision and success curves, their summary
//! numbers, attribute slices and plot-data files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cle, iou, normalized_cle, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Precision,
    NormPrecision,
    Success,
}

impl CurveKind {
    pub const ALL: [CurveKind; 3] = [CurveKind::Precision, CurveKind::NormPrecision, CurveKind::Success];

    pub fn as_str(self) -> &'static str {
        match self {
            CurveKind::Precision => "precision",
            CurveKind::NormPrecision => "norm_precision",
            CurveKind::Success => "success",
        }
    }

    /// 0..=50 px; 51 points on [0, 0.5]; 21 points on [0, 1].
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            CurveKind::Precision => (0..=50).map(f64::from).collect(),
            CurveKind::NormPrecision => (0..=50).map(|i| f64::from(i) / 100.0).collect(),
            CurveKind::Success => (0..=20).map(|i| f64::from(i) / 20.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub kind: CurveKind,
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl EvalCurve {
    pub fn value_at(&self, t: f64) -> Result<f64> {
        self.thresholds.iter().position(|&x| x == t).map(|i| self.values[i]).ok_or(Error::MissingThreshold(t))
    }

    /// Mean of the sampled values.
    pub fn auc(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn check_lengths(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    Ok(())
}

fn fraction_curve(kind: CurveKind, errs: &[f64], pass: impl Fn(f64, f64) -> bool) -> EvalCurve {
    let thresholds = kind.thresholds();
    let n = errs.len().max(1) as f64;
    let values = thresholds.iter().map(|&t| errs.iter().filter(|&&e| pass(e, t)).count() as f64 / n).collect();
    EvalCurve { kind, thresholds, values }
}

/// Fraction of frames with center error `<= tau` pixels.
pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<EvalCurve> {
    check_lengths(pred, gt)?;
    let errs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| cle(p, g)).collect();
    Ok(fraction_curve(CurveKind::Precision, &errs, |e, t| e <= t))
}

pub fn precision_at_20(curve: &EvalCurve) -> Result<f64> {
    curve.value_at(20.0)
}

pub fn norm_precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<EvalCurve> {
    check_lengths(pred, gt)?;
    let errs = pred.iter().zip(gt).map(|(p, g)| normalized_cle(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(fraction_curve(CurveKind::NormPrecision, &errs, |e, t| e <= t))
}

pub fn norm_precision_auc(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    Ok(norm_precision_curve(pred, gt)?.auc())
}

/// Fraction of frames with IoU strictly greater than each threshold.
pub fn success_curve(pred: &[BBox], gt: &[BBox]) -> Result<EvalCurve> {
    check_lengths(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    Ok(fraction_curve(CurveKind::Success, &ious, |o, t| o > t))
}

pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    Ok(success_curve(pred, gt)?.auc())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Precision at 20 px.
    pub precision: f64,
    /// Normalized-precision AUC on [0, 0.5].
    pub norm_precision: f64,
    /// Success AUC.
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub attributes: BTreeSet<String>,
    pub frames: usize,
    pub curves: Vec<EvalCurve>,
}

impl SequenceResult {
    pub fn curve(&self, kind: CurveKind) -> &EvalCurve {
        self.curves.iter().find(|c| c.kind == kind).expect("all curve kinds are computed")
    }
}

pub fn evaluate_sequence(name: &str, attributes: &BTreeSet<String>, pred: &[BBox], gt: &[BBox]) -> Result<SequenceResult> {
    Ok(SequenceResult {
        name: name.to_string(),
        attributes: attributes.clone(),
        frames: gt.len(),
        curves: vec![precision_curve(pred, gt)?, norm_precision_curve(pred, gt)?, success_curve(pred, gt)?],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Each sequence weighs the same.
    SequenceAverage,
    /// Each frame weighs the same.
    FrameWeighted,
}

/// Aggregate curves over `results`, in sorted-name order for a stable
/// reduction.
pub fn aggregate_curves(results: &[&SequenceResult], mode: Aggregation) -> Vec<EvalCurve> {
    let mut sorted: Vec<&&SequenceResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    CurveKind::ALL
        .iter()
        .map(|&kind| {
            let thresholds = kind.thresholds();
            let mut values = vec![0.0; thresholds.len()];
            let mut total = 0.0;
            for r in &sorted {
                let w = match mode {
                    Aggregation::SequenceAverage => 1.0,
                    Aggregation::FrameWeighted => r.frames as f64,
                };
                for (v, c) in values.iter_mut().zip(&r.curve(kind).values) {
                    *v += w * c;
                }
                total += w;
            }
            if total > 0.0 {
                values.iter_mut().for_each(|v| *v /= total);
            }
            EvalCurve { kind, thresholds, values }
        })
        .collect()
}

fn scores_of(curves: &[EvalCurve]) -> Scores {
    let get = |k: CurveKind| curves.iter().find(|c| c.kind == k).unwrap();
    Scores {
        precision: precision_at_20(get(CurveKind::Precision)).unwrap_or(0.0),
        norm_precision: get(CurveKind::NormPrecision).auc(),
        success: get(CurveKind::Success).auc(),
    }
}

pub fn aggregate(results: &[&SequenceResult], mode: Aggregation) -> Scores {
    scores_of(&aggregate_curves(results, mode))
}

/// Scores per attribute tag over the sequences carrying it.
pub fn attribute_report(results: &[SequenceResult], mode: Aggregation) -> BTreeMap<String, Scores> {
    let tags: BTreeSet<&String> = results.iter().flat_map(|r| r.attributes.iter()).collect();
    tags.into_iter()
        .map(|t| {
            let subset: Vec<&SequenceResult> = results.iter().filter(|r| r.attributes.contains(t)).collect();
            (t.clone(), aggregate(&subset, mode))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScores {
    pub name: String,
    pub frames: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    pub sequences: Vec<SequenceScores>,
    pub curves: Vec<EvalCurve>,
    pub overall: Scores,
    pub attributes: BTreeMap<String, Scores>,
}

pub fn build_report(results: &[SequenceResult], mode: Aggregation) -> EvalReport {
    let refs: Vec<&SequenceResult> = results.iter().collect();
    let curves = aggregate_curves(&refs, mode);
    EvalReport {
        aggregation: mode,
        sequences: results
            .iter()
            .map(|r| SequenceScores { name: r.name.clone(), frames: r.frames, scores: scores_of(&r.curves) })
            .collect(),
        overall: scores_of(&curves),
        curves,
        attributes: attribute_report(results, mode),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerSummary {
    pub aggregation: Aggregation,
    pub overall: Scores,
    pub attributes: BTreeMap<String, Scores>,
    pub sequences: Vec<SequenceScores>,
}

/// One CSV per curve kind (`threshold` column plus one column per tracker,
/// six decimals) and `summary.json`.
pub fn emit_plot_data(reports: &[(String, &EvalReport)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for kind in CurveKind::ALL {
        let mut csv = String::from("threshold");
        for (name, _) in reports {
            csv.push(',');
            csv.push_str(name);
        }
        csv.push('\n');
        for (i, t) in kind.thresholds().iter().enumerate() {
            write!(csv, "{t:.6}").unwrap();
            for (_, r) in reports {
                let c = r.curves.iter().find(|c| c.kind == kind).unwrap();
                write!(csv, ",{:.6}", c.values[i]).unwrap();
            }
            csv.push('\n');
        }
        fs::write(dir.join(format!("{}.csv", kind.as_str())), csv)?;
    }
    let summary: BTreeMap<&str, TrackerSummary> = reports
        .iter()
        .map(|(n, r)| {
            (
                n.as_str(),
                TrackerSummary {
                    aggregation: r.aggregation,
                    overall: r.overall,
                    attributes: r.attributes.clone(),
                    sequences: r.sequences.clone(),
                },
            )
        })
        .collect();
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

pub fn load_summary(path: &Path) -> Result<BTreeMap<String, TrackerSummary>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
