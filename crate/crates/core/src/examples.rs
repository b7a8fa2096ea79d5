//! Canonical training views: reference and test crops around an object at a
//! fixed scale, their labels, and cached backbone features.

use rand::Rng;

use crate::backbone::{extract, BackboneParams, FeatureMap};
use crate::error::Result;
use crate::geometry::{encode_box_state, BBox, BoxState, Point};
use crate::imaging::{sample_crop, Modality};
use crate::labels::{default_sigma, gaussian_label, ScoreMap};
use crate::nn::Tensor;
use crate::patchgen::{branch_input, test_label_modality, PairedSample, SlotTag};

/// Side of the square network input for reference and test views.
pub const INPUT_SIDE: usize = 64;
/// Crop side as a multiple of the object's geometric-mean side.
pub const CONTEXT: f64 = 2.0;

/// Square region of side `context * sqrt(w h)` centered on the box.
pub fn context_region(b: &BBox, context: f64) -> BBox {
    let side = context * (b.w * b.h).sqrt();
    BBox::from_center(b.center(), side, side)
}

/// Maps a frame box into the pixel coordinates of `region` resampled to
/// `side x side`.
pub fn to_crop(b: &BBox, region: &BBox, side: usize) -> BBox {
    let sx = side as f64 / region.w;
    let sy = side as f64 / region.h;
    BBox::new((b.x - region.x) * sx, (b.y - region.y) * sy, b.w * sx, b.h * sy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub rgb: Tensor,
    pub tir: Option<Tensor>,
    /// Object box in view pixels.
    pub bbox: BBox,
}

impl View {
    pub fn modality(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Tir => self.tir.as_ref().expect("view has no TIR channel"),
        }
    }
}

/// Crops `context_region(around)` from the source(s) and places `object` in
/// the crop's coordinates.
pub fn crop_view(rgb: &Tensor, tir: Option<&Tensor>, object: &BBox, around: &BBox, side: usize) -> View {
    let region = context_region(around, CONTEXT);
    View {
        rgb: sample_crop(rgb, &region, side, side),
        tir: tir.map(|t| sample_crop(t, &region, side, side)),
        bbox: to_crop(object, &region, side),
    }
}

/// Test-view perturbation: center offset as a fraction of the box size and
/// log-scale offset, both uniform in `[-x, x]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Jitter {
    pub center: f64,
    pub log_scale: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { center: 0.25, log_scale: 0.25 }
    }
}

fn sym(rng: &mut impl Rng, x: f64) -> f64 {
    if x > 0.0 {
        rng.random_range(-x..x)
    } else {
        0.0
    }
}

pub fn jitter_box(b: &BBox, j: Jitter, rng: &mut impl Rng) -> BBox {
    let c = b.center();
    let dx = sym(rng, j.center) * b.w;
    let dy = sym(rng, j.center) * b.h;
    let s = sym(rng, j.log_scale).exp();
    BBox::from_center(Point::new(c.x + dx, c.y + dy), b.w * s, b.h * s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub reference: View,
    pub test: View,
}

/// Reference view centered on the pseudo box; test view centered on a
/// jittered copy of it.
pub fn paired_example(sample: &PairedSample, jitter: Jitter, rng: &mut impl Rng) -> Example {
    let rgb = sample.rgb_tensor();
    let tir = sample.tir_tensor();
    let p = sample.pseudo_box;
    let reference = crop_view(&rgb, Some(&tir), &p, &p, INPUT_SIDE);
    let test = crop_view(&rgb, Some(&tir), &p, &jitter_box(&p, jitter, rng), INPUT_SIDE);
    Example { reference, test }
}

/// Single-modality example from annotated frames.
pub fn labeled_example(
    ref_img: &Tensor,
    ref_box: &BBox,
    test_img: &Tensor,
    test_box: &BBox,
    jitter: Jitter,
    rng: &mut impl Rng,
) -> Example {
    let reference = crop_view(ref_img, None, ref_box, ref_box, INPUT_SIDE);
    let test = crop_view(test_img, None, test_box, &jitter_box(test_box, jitter, rng), INPUT_SIDE);
    Example { reference, test }
}

/// Gaussian label for an object box on a feature grid.
pub fn center_label(object: &BBox, fm: &FeatureMap) -> Result<ScoreMap> {
    let sigma = default_sigma(object.w, object.h, fm.stride);
    gaussian_label(object.center(), fm.rows(), fm.cols(), fm.stride, fm.origin, sigma)
}

/// Everything the heads need for one slot of a batch.
#[derive(Debug, Clone)]
pub struct SlotData {
    pub reference: FeatureMap,
    pub roi: BBox,
    pub test: FeatureMap,
    pub label: ScoreMap,
    /// Test features the box estimator pools over: the labeled half of a
    /// concatenated input, so pooled statistics match a single-modality
    /// frame at tracking time.
    pub bbe_test: Option<FeatureMap>,
    pub target: BoxState,
}

impl SlotData {
    pub fn build(backbone: &BackboneParams, ex: &Example, tag: SlotTag, concat: bool) -> Result<Self> {
        let (ref_in, ref_off) = input_for(&ex.reference, tag.reference, concat, true);
        let (test_in, test_off) = input_for(&ex.test, test_label_modality(tag, concat), concat, false);
        let reference = extract(backbone, &ref_in);
        let test = extract(backbone, &test_in);
        let roi = ex.reference.bbox.translate(ref_off, 0.0);
        let object = ex.test.bbox.translate(test_off, 0.0);
        let mut label = center_label(&object, &test)?;
        if concat {
            let w = ex.test.rgb.w as f64;
            let twin = ex.test.bbox.translate(if test_off == 0.0 { w } else { 0.0 }, 0.0);
            let other = center_label(&twin, &test)?;
            label.values.data.iter_mut().zip(&other.values.data).for_each(|(a, b)| *a = a.max(*b));
        }
        let (bbe_test, target) = if concat {
            let x0 = (test_off / test.stride).round() as usize;
            let half = FeatureMap { values: test.values.crop_cols(x0, test.cols() / 2), stride: test.stride, origin: test.origin };
            (Some(half), encode_box_state(&ex.test.bbox)?)
        } else {
            (None, encode_box_state(&object)?)
        };
        Ok(Self { reference, roi, test, label, bbe_test, target })
    }

    pub fn bbe_view(&self) -> &FeatureMap {
        self.bbe_test.as_ref().unwrap_or(&self.test)
    }
}

fn input_for(v: &View, m: Modality, concat: bool, is_reference: bool) -> (Tensor, f64) {
    match &v.tir {
        Some(tir) => branch_input(&v.rgb, tir, m, concat, is_reference),
        None => (v.rgb.clone(), 0.0),
    }
}

/// Features for both slot kinds of a paired example: reference RGB / test
/// TIR, and reference TIR / test RGB.
#[derive(Debug, Clone)]
pub struct CachedExample {
    pub rgb_ref: SlotData,
    pub tir_ref: SlotData,
}

impl CachedExample {
    pub fn build(backbone: &BackboneParams, ex: &Example, concat: bool) -> Result<Self> {
        let rgb_ref = SlotData::build(backbone, ex, SlotTag { reference: Modality::Rgb, test: Modality::Tir }, concat)?;
        let tir_ref = SlotData::build(backbone, ex, SlotTag { reference: Modality::Tir, test: Modality::Rgb }, concat)?;
        Ok(Self { rgb_ref, tir_ref })
    }

    pub fn slot(&self, tag: SlotTag) -> &SlotData {
        match tag.reference {
            Modality::Rgb => &self.rgb_ref,
            Modality::Tir => &self.tir_ref,
        }
    }
}
