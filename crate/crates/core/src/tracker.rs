//! One-pass tracking: first-frame filter adaptation, then per-frame center
//! localization and box refinement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract, FeatureMap};
use crate::bbe::{modulate, refine_box, CropView};
use crate::data::FrameSource;
use crate::error::{Error, Result};
use crate::examples::{center_label, context_region, to_crop, CONTEXT, INPUT_SIDE};
use crate::geometry::{BBox, Point};
use crate::imaging::sample_crop;
use crate::model::Model;
use crate::nn::Tensor;
use crate::tcl::{inner_loop_adapt, locate_center, Filter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Search-region side as a multiple of `sqrt(w h)`.
    pub search_scale: f64,
    /// Pixel side the search region is resampled to.
    pub search_side: usize,
    pub adapt_steps: usize,
    pub n_jitter: usize,
    /// Largest per-frame change of box size, as a factor.
    pub max_scale_change: f64,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { search_scale: 5.0, search_side: 160, adapt_steps: 5, n_jitter: 5, max_scale_change: 1.25, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub filter: Filter,
    pub modulation: Vec<f64>,
    pub reference: FeatureMap,
    pub previous: BBox,
    pub scale: f64,
    pub frame_index: usize,
}

/// Square search region around `b`.
pub fn search_region(b: &BBox, scale: f64) -> BBox {
    let side = scale * (b.w * b.h).sqrt();
    BBox::from_center(b.center(), side, side)
}

fn crop_features(model: &Model, frame: &Tensor, region: &BBox, side: usize) -> FeatureMap {
    extract(&model.backbone, &sample_crop(frame, region, side, side))
}

pub fn init(model: &Model, cfg: &TrackerConfig, frame: &Tensor, gt: &BBox) -> Result<TrackerState> {
    gt.validate()?;
    let c = gt.center();
    if !(c.x >= 0.0 && c.y >= 0.0 && c.x < frame.w as f64 && c.y < frame.h as f64) {
        return Err(Error::Init(format!("box {gt:?} is outside the {}x{} frame", frame.w, frame.h)));
    }
    let region = search_region(gt, cfg.search_scale);
    let feats = crop_features(model, frame, &region, cfg.search_side);
    let roi = to_crop(gt, &region, cfg.search_side);
    let label = center_label(&roi, &feats)?;
    let filter = inner_loop_adapt(&model.tcl, &feats, &roi, &label, cfg.adapt_steps)?;
    let bbe_region = context_region(gt, CONTEXT);
    let bbe_ref = crop_features(model, frame, &bbe_region, INPUT_SIDE);
    let modulation = modulate(&model.bbe, &bbe_ref, &to_crop(gt, &bbe_region, INPUT_SIDE))?;
    Ok(TrackerState { filter, modulation, reference: feats, previous: *gt, scale: cfg.search_scale, frame_index: 0 })
}

fn clamp_box(b: BBox, prev: &BBox, frame: &Tensor, max_change: f64) -> BBox {
    let clamp_side = |v: f64, p: f64| v.clamp(p / max_change, p * max_change).clamp(1.0, 4.0 * frame.w.max(frame.h) as f64);
    let w = clamp_side(b.w, prev.w);
    let h = clamp_side(b.h, prev.h);
    let c = b.center();
    let c = Point::new(c.x.clamp(0.0, frame.w as f64 - 1e-6), c.y.clamp(0.0, frame.h as f64 - 1e-6));
    BBox::from_center(c, w, h)
}

pub fn track_frame(model: &Model, cfg: &TrackerConfig, state: &mut TrackerState, frame: &Tensor) -> Result<BBox> {
    let prev = state.previous;
    let region = search_region(&prev, state.scale);
    let feats = crop_features(model, frame, &region, cfg.search_side);
    let p = locate_center(&model.tcl, &state.filter, &feats)?;
    let k = region.w / cfg.search_side as f64;
    let center = Point::new(region.x + p.x * k, region.y + p.y * k);
    let prior = BBox::from_center(center, prev.w, prev.h);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (state.frame_index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let refined = refine_box(&model.bbe, &state.modulation, &prior, cfg.n_jitter, &mut rng, |cand| {
        let r = context_region(cand, CONTEXT);
        Ok(CropView { features: crop_features(model, frame, &r, INPUT_SIDE), region: r, input_size: (INPUT_SIDE, INPUT_SIDE) })
    })?;
    let out = clamp_box(refined, &prev, frame, cfg.max_scale_change);
    state.previous = out;
    state.frame_index += 1;
    Ok(out)
}

/// OPE over a frame source: the first output is `init_box` itself.
pub fn run_sequence(model: &Model, cfg: &TrackerConfig, frames: &dyn FrameSource, init_box: &BBox) -> Result<Vec<BBox>> {
    if frames.len() < 2 {
        return Err(Error::Init("sequence needs at least two frames".into()));
    }
    let mut state = init(model, cfg, &frames.frame(0)?, init_box)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(*init_box);
    for i in 1..frames.len() {
        out.push(track_frame(model, cfg, &mut state, &frames.frame(i)?)?);
    }
    Ok(out)
}
