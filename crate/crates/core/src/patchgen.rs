//! Paired-patch generation from aligned RGB/TIR images and mini-batch
//! composition across the two branches.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::AlignedPair;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::{self, Modality};
use crate::nn::Tensor;

/// Side of the square patches produced by `random_sampling`.
pub const RANDOM_PATCH_SIDE: u32 = 100;
/// Pseudo-box side as a fraction of the patch side for the center-area and
/// random-sampling strategies.
pub const PSEUDO_BOX_FRACTION: f64 = 0.5;
/// Detection boxes are cropped with this much context per dimension.
pub const DETECTION_CONTEXT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    CenterArea,
    RandomSampling,
    Detection,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::CenterArea => "center_area",
            Strategy::RandomSampling => "random_sampling",
            Strategy::Detection => "detection",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "center_area" => Some(Strategy::CenterArea),
            "random_sampling" => Some(Strategy::RandomSampling),
            "detection" => Some(Strategy::Detection),
            _ => None,
        }
    }
}

/// Integer pixel rectangle in the source pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub index: usize,
    pub crop: CropRect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub rgb_patch: RgbImage,
    pub tir_patch: GrayImage,
    /// Pseudo object box in patch coordinates.
    pub pseudo_box: BBox,
    pub strategy: Strategy,
    pub source: Source,
}

impl PairedSample {
    pub fn rgb_tensor(&self) -> Tensor {
        imaging::rgb_to_tensor(&self.rgb_patch)
    }

    pub fn tir_tensor(&self) -> Tensor {
        imaging::gray_to_tensor(&self.tir_patch)
    }
}

fn crop_both(pair: &AlignedPair, r: CropRect) -> (RgbImage, GrayImage) {
    (imaging::crop_rgb(&pair.rgb, r.x, r.y, r.w, r.h), imaging::crop_gray(&pair.tir, r.x, r.y, r.w, r.h))
}

fn centered_pseudo_box(w: f64, h: f64) -> BBox {
    let side = PSEUDO_BOX_FRACTION * w.min(h);
    BBox::new((w - side) / 2.0, (h - side) / 2.0, side, side)
}

/// The central `patch_size` square of both images, with a centered
/// half-side square as the fake object.
pub fn center_area(pair: &AlignedPair, patch_size: u32) -> Result<PairedSample> {
    let (w, h) = pair.dimensions();
    if patch_size == 0 || patch_size > w || patch_size > h {
        return Err(Error::Crop(format!("patch {patch_size} does not fit image {w}x{h}")));
    }
    let crop = CropRect { x: (w - patch_size) / 2, y: (h - patch_size) / 2, w: patch_size, h: patch_size };
    let (rgb_patch, tir_patch) = crop_both(pair, crop);
    Ok(PairedSample {
        rgb_patch,
        tir_patch,
        pseudo_box: centered_pseudo_box(patch_size as f64, patch_size as f64),
        strategy: Strategy::CenterArea,
        source: Source { index: pair.index, crop },
    })
}

/// A region of about a sixth of the image area, identical in both
/// modalities, resized to 100x100.
pub fn random_sampling(pair: &AlignedPair, rng: &mut impl Rng) -> Result<PairedSample> {
    let (w, h) = pair.dimensions();
    let target = (w as f64 * h as f64) / 6.0;
    if target < 16.0 {
        return Err(Error::Crop(format!("image {w}x{h} too small for random sampling")));
    }
    let area = target * rng.random_range(0.9..1.1);
    let aspect: f64 = rng.random_range(0.75f64.ln()..1.33f64.ln()).exp();
    let cw = ((area * aspect).sqrt().round() as u32).clamp(1, w);
    let ch = ((area / aspect).sqrt().round() as u32).clamp(1, h);
    let x = rng.random_range(0..=w - cw);
    let y = rng.random_range(0..=h - ch);
    let crop = CropRect { x, y, w: cw, h: ch };
    let (rgb, tir) = crop_both(pair, crop);
    let side = RANDOM_PATCH_SIDE;
    Ok(PairedSample {
        rgb_patch: imaging::resize_rgb(&rgb, side, side),
        tir_patch: imaging::resize_gray(&tir, side, side),
        pseudo_box: centered_pseudo_box(side as f64, side as f64),
        strategy: Strategy::RandomSampling,
        source: Source { index: pair.index, crop },
    })
}

/// One patch per externally supplied RGB detection: the box with 2x context,
/// clipped to the image.
pub fn detection_patches(pair: &AlignedPair) -> Result<Vec<PairedSample>> {
    let boxes = match &pair.detections {
        Some(b) if !b.is_empty() => b,
        _ => {
            return Err(Error::StrategyUnavailable {
                strategy: "detection",
                reason: format!("pair {} has no detections; add a \"boxes\" list to its manifest line", pair.index),
            })
        }
    };
    let (w, h) = pair.dimensions();
    let frame = BBox::new(0.0, 0.0, w as f64, h as f64);
    let mut out = Vec::with_capacity(boxes.len());
    for b in boxes {
        let ctx = BBox::from_center(b.center(), b.w * DETECTION_CONTEXT, b.h * DETECTION_CONTEXT);
        let x0 = ctx.x.max(0.0).floor() as u32;
        let y0 = ctx.y.max(0.0).floor() as u32;
        let x1 = (ctx.right().min(w as f64).ceil() as u32).min(w);
        let y1 = (ctx.bottom().min(h as f64).ceil() as u32).min(h);
        let Some(visible) = b.intersect(&frame) else {
            continue;
        };
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let crop = CropRect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 };
        let (rgb_patch, tir_patch) = crop_both(pair, crop);
        out.push(PairedSample {
            rgb_patch,
            tir_patch,
            pseudo_box: visible.translate(-(x0 as f64), -(y0 as f64)),
            strategy: Strategy::Detection,
            source: Source { index: pair.index, crop },
        });
    }
    if out.is_empty() {
        return Err(Error::StrategyUnavailable {
            strategy: "detection",
            reason: format!("no detection of pair {} overlaps the image", pair.index),
        });
    }
    Ok(out)
}

/// Paired samples from every pair with one strategy. Random sampling draws
/// from a generator seeded with `seed`.
pub fn samples_for(pairs: &[AlignedPair], strategy: Strategy, patch_size: u32, seed: u64) -> Result<Vec<PairedSample>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        match strategy {
            Strategy::CenterArea => out.push(center_area(p, patch_size)?),
            Strategy::RandomSampling => out.push(random_sampling(p, &mut rng)?),
            Strategy::Detection => out.extend(detection_patches(p)?),
        }
    }
    Ok(out)
}

/// How modalities are routed to the two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// TIR to the reference branch, RGB to the test branch.
    RefTir,
    /// RGB to the reference branch, TIR to the test branch.
    RefRgb,
    /// Upper half of the batch as `RefRgb`, lower half as `RefTir`.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLayout {
    pub mixing: Mixing,
    pub concat_horizontal: bool,
}

/// Which modality each branch is supervised on for one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotTag {
    pub reference: Modality,
    pub test: Modality,
}

impl SlotTag {
    pub fn receives_tir(&self, branch: crate::params::Branch) -> bool {
        match branch {
            crate::params::Branch::Reference => self.reference == Modality::Tir,
            crate::params::Branch::Test => self.test == Modality::Tir,
        }
    }
}

/// Per-slot modality routing for a batch of `n` samples.
pub fn assign_slots(n: usize, layout: &BatchLayout) -> Result<Vec<SlotTag>> {
    let rgb_ref = SlotTag { reference: Modality::Rgb, test: Modality::Tir };
    let tir_ref = SlotTag { reference: Modality::Tir, test: Modality::Rgb };
    match layout.mixing {
        Mixing::RefTir => Ok(vec![tir_ref; n]),
        Mixing::RefRgb => Ok(vec![rgb_ref; n]),
        Mixing::Mixed => {
            if n % 2 != 0 {
                return Err(Error::Layout(format!("mixed layout needs an even batch, got {n}")));
            }
            Ok((0..n).map(|i| if i < n / 2 { rgb_ref } else { tir_ref }).collect())
        }
    }
}

/// Left-to-right modality order of concatenated inputs on each branch.
pub fn concat_order(is_reference: bool) -> [Modality; 2] {
    if is_reference {
        [Modality::Rgb, Modality::Tir]
    } else {
        [Modality::Tir, Modality::Rgb]
    }
}

/// Builds one branch input from a pair of aligned tensors. Returns the input
/// and the horizontal offset of the half holding `modality`.
pub fn branch_input(rgb: &Tensor, tir: &Tensor, modality: Modality, concat: bool, is_reference: bool) -> (Tensor, f64) {
    let pick = |m: Modality| if m == Modality::Rgb { rgb } else { tir };
    if !concat {
        return (pick(modality).clone(), 0.0);
    }
    let [left, right] = concat_order(is_reference);
    let offset = if left == modality { 0.0 } else { rgb.w as f64 };
    (pick(left).hconcat(pick(right)), offset)
}

/// Modality whose copy carries the test-side label. A concatenated test
/// input holds both copies of the object; the label marks the thermal one.
pub fn test_label_modality(tag: SlotTag, concat: bool) -> Modality {
    if concat {
        Modality::Tir
    } else {
        tag.test
    }
}

#[derive(Debug, Clone)]
pub struct ComposedBatch {
    pub reference: Vec<Tensor>,
    pub test: Vec<Tensor>,
    /// Pseudo boxes shifted into the labeled half of each input.
    pub reference_boxes: Vec<BBox>,
    pub test_boxes: Vec<BBox>,
    pub tags: Vec<SlotTag>,
}

/// Routes each sample's patches to reference and test slots.
pub fn compose_batch(samples: &[PairedSample], layout: &BatchLayout) -> Result<ComposedBatch> {
    let tags = assign_slots(samples.len(), layout)?;
    let mut batch = ComposedBatch {
        reference: Vec::with_capacity(samples.len()),
        test: Vec::with_capacity(samples.len()),
        reference_boxes: Vec::with_capacity(samples.len()),
        test_boxes: Vec::with_capacity(samples.len()),
        tags: tags.clone(),
    };
    for (s, tag) in samples.iter().zip(&tags) {
        let (rgb, tir) = (s.rgb_tensor(), s.tir_tensor());
        let (r, r_off) = branch_input(&rgb, &tir, tag.reference, layout.concat_horizontal, true);
        let m = test_label_modality(*tag, layout.concat_horizontal);
        let (t, t_off) = branch_input(&rgb, &tir, m, layout.concat_horizontal, false);
        batch.reference.push(r);
        batch.test.push(t);
        batch.reference_boxes.push(s.pseudo_box.translate(r_off, 0.0));
        batch.test_boxes.push(s.pseudo_box.translate(t_off, 0.0));
    }
    Ok(batch)
}

#[derive(Serialize, Deserialize)]
pub struct PairIndexLine {
    pub rgb_patch: String,
    pub tir_patch: String,
    pub pseudo_box: [f64; 4],
    pub strategy: Strategy,
    pub source: Source,
}

/// Writes patch PNGs plus an `index.jsonl` describing them.
pub fn write_pairs(dir: &Path, samples: &[PairedSample]) -> Result<()> {
    fs::create_dir_all(dir.join("patches"))?;
    let mut index = fs::File::create(dir.join("index.jsonl"))?;
    for (i, s) in samples.iter().enumerate() {
        let rgb_rel = format!("patches/{i:06}_rgb.png");
        let tir_rel = format!("patches/{i:06}_tir.png");
        let rgb_path = dir.join(&rgb_rel);
        s.rgb_patch.save(&rgb_path).map_err(|source| Error::Image { path: rgb_path, source })?;
        let tir_path = dir.join(&tir_rel);
        s.tir_patch.save(&tir_path).map_err(|source| Error::Image { path: tir_path, source })?;
        let b = s.pseudo_box;
        let line = PairIndexLine {
            rgb_patch: rgb_rel,
            tir_patch: tir_rel,
            pseudo_box: [b.x, b.y, b.w, b.h],
            strategy: s.strategy,
            source: s.source,
        };
        writeln!(index, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}
