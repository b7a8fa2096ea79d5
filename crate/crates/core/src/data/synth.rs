//! Procedural RGB scenes with one textured object, a thermal counterpart
//! derived from each RGB frame, and moving-object sequences for tracking.
//!
//! Every random draw comes from a `ChaCha8Rng` seeded from the spec, so
//! output is bit-identical across runs and platforms.

use std::collections::BTreeSet;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::imaging::Image;

use super::sequence::InMemorySequence;

/// RGB to thermal mapping: channel collapse, optional polarity inversion,
/// box blur, additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TirTransform {
    pub weights: [f64; 3],
    pub invert: bool,
    pub blur_radius: u32,
    pub noise_scale: f64,
}

impl Default for TirTransform {
    fn default() -> Self {
        // half-gain luminance: thermal frames keep shape but lose contrast
        Self { weights: [0.1495, 0.2935, 0.057], invert: true, blur_radius: 2, noise_scale: 4.0 }
    }
}

impl TirTransform {
    pub fn identity_collapse(weights: [f64; 3]) -> Self {
        Self { weights, invert: false, blur_radius: 0, noise_scale: 0.0 }
    }

    pub fn apply(&self, rgb: &RgbImage, rng: &mut impl Rng) -> GrayImage {
        let (w, h) = rgb.dimensions();
        let mut plane: Vec<f64> = rgb
            .pixels()
            .map(|p| {
                let v = self.weights[0] * p[0] as f64 + self.weights[1] * p[1] as f64 + self.weights[2] * p[2] as f64;
                if self.invert {
                    255.0 - v
                } else {
                    v
                }
            })
            .collect();
        for _ in 0..2 {
            box_blur(&mut plane, w as usize, h as usize, self.blur_radius as usize);
        }
        if self.noise_scale > 0.0 {
            for v in plane.iter_mut() {
                *v += self.noise_scale * gauss(rng);
            }
        }
        GrayImage::from_fn(w, h, |x, y| Luma([plane[(y * w + x) as usize].round().clamp(0.0, 255.0) as u8]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_pairs: usize,
    pub image_size: u32,
    pub object_size_range: (f64, f64),
    /// Largest offset of the object center from the image center, as a
    /// fraction of the side. `None` places objects uniformly.
    pub center_spread: Option<f64>,
    /// Chance of a smaller second object beside the main one.
    pub distractor_prob: f64,
    pub seed: u64,
    pub tir_transform: TirTransform,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_pairs: 200,
            image_size: 96,
            object_size_range: (36.0, 60.0),
            center_spread: Some(0.1),
            distractor_prob: 0.5,
            seed: 0,
            tir_transform: TirTransform::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub rgb: RgbImage,
    pub tir: GrayImage,
    /// True object box; for test oracles only, never a training signal.
    pub object: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqSpec {
    pub n_sequences: usize,
    pub n_frames: usize,
    pub image_size: u32,
    pub object_size_range: (f64, f64),
    /// Mean per-frame displacement in pixels.
    pub speed: f64,
    /// Per-frame standard deviation of the log-scale random walk.
    pub scale_drift: f64,
    pub distractor_prob: f64,
    pub seed: u64,
    pub tir_transform: TirTransform,
    /// Emit thermal frames (true) or the RGB originals (false).
    pub thermal: bool,
}

impl Default for SeqSpec {
    fn default() -> Self {
        Self {
            n_sequences: 10,
            n_frames: 40,
            image_size: 128,
            object_size_range: (22.0, 34.0),
            speed: 1.5,
            scale_drift: 0.02,
            distractor_prob: 0.3,
            seed: 1000,
            tir_transform: TirTransform::default(),
            thermal: true,
        }
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn box_blur(plane: &mut [f64], w: usize, h: usize, r: usize) {
    if r == 0 {
        return;
    }
    let norm = 1.0 / (2 * r + 1) as f64;
    let mut tmp = vec![0.0; plane.len()];
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -(r as isize)..=r as isize {
                acc += plane[y * w + clamp(x as isize + d, w)];
            }
            tmp[y * w + x] = acc * norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -(r as isize)..=r as isize {
                acc += tmp[clamp(y as isize + d, h) * w + x];
            }
            plane[y * w + x] = acc * norm;
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse,
    Rect,
    Diamond,
}

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Checker { period: f64 },
    Stripes { period: f64, angle: f64 },
    Rings { period: f64 },
}

#[derive(Debug, Clone)]
struct Look {
    shape: Shape,
    color_a: [f64; 3],
    color_b: [f64; 3],
    pattern: Pattern,
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    rect: bool,
}

#[derive(Debug, Clone)]
struct Background {
    base_a: [f64; 3],
    base_b: [f64; 3],
    dir: (f64, f64),
    blobs: Vec<Blob>,
    stripe_freq: f64,
    stripe_angle: f64,
    stripe_amp: f64,
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

impl Background {
    fn random(rng: &mut impl Rng, size: u32) -> Self {
        let s = size as f64;
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let n_blobs = rng.random_range(4..9);
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                rx: rng.random_range(0.05 * s..0.25 * s),
                ry: rng.random_range(0.05 * s..0.25 * s),
                color: random_color(rng, 40.0, 200.0),
                rect: rng.random_bool(0.5),
            })
            .collect();
        Self {
            base_a: random_color(rng, 50.0, 190.0),
            base_b: random_color(rng, 50.0, 190.0),
            dir: (angle.cos(), angle.sin()),
            blobs,
            stripe_freq: rng.random_range(0.3..0.9),
            stripe_angle: rng.random_range(0.0..std::f64::consts::PI),
            stripe_amp: rng.random_range(6.0..18.0),
        }
    }

    fn color_at(&self, x: f64, y: f64, size: f64) -> [f64; 3] {
        let t = (((x / size - 0.5) * self.dir.0 + (y / size - 0.5) * self.dir.1) + 0.5).clamp(0.0, 1.0);
        let mut c = [0.0; 3];
        for (k, v) in c.iter_mut().enumerate() {
            *v = self.base_a[k] * (1.0 - t) + self.base_b[k] * t;
        }
        for b in &self.blobs {
            let (dx, dy) = ((x - b.cx) / b.rx, (y - b.cy) / b.ry);
            let inside = if b.rect { dx.abs() <= 1.0 && dy.abs() <= 1.0 } else { dx * dx + dy * dy <= 1.0 };
            if inside {
                for (k, v) in c.iter_mut().enumerate() {
                    *v = 0.35 * *v + 0.65 * b.color[k];
                }
            }
        }
        let (sa, ca) = self.stripe_angle.sin_cos();
        let stripe = self.stripe_amp * ((x * ca + y * sa) * self.stripe_freq).sin();
        c.map(|v| v + stripe)
    }
}

impl Look {
    fn random(rng: &mut impl Rng, bg_lum: f64) -> Self {
        let shape = match rng.random_range(0..3) {
            0 => Shape::Ellipse,
            1 => Shape::Rect,
            _ => Shape::Diamond,
        };
        // Strong luminance contrast against the background, random polarity.
        let target_lum = if bg_lum > 128.0 || (bg_lum > 90.0 && rng.random_bool(0.5)) {
            rng.random_range(15.0..(bg_lum - 60.0).max(25.0))
        } else {
            rng.random_range((bg_lum + 60.0).min(225.0)..240.0)
        };
        let color_a = random_color(rng, 0.0, 255.0);
        let color_b = random_color(rng, 0.0, 255.0);
        // Hue texture with matched luminance: visible in RGB, flat once
        // collapsed to one channel.
        let fit = |c: [f64; 3]| {
            let d = target_lum - luminance(c);
            c.map(|v| (v + d).clamp(0.0, 255.0))
        };
        let pattern = match rng.random_range(0..3) {
            0 => Pattern::Checker { period: rng.random_range(0.18..0.35) },
            1 => Pattern::Stripes { period: rng.random_range(0.15..0.3), angle: rng.random_range(0.0..std::f64::consts::PI) },
            _ => Pattern::Rings { period: rng.random_range(0.15..0.3) },
        };
        Self { shape, color_a: fit(color_a), color_b: fit(color_b), pattern }
    }

    /// Color at object-normalized coordinates `(u, v)` in [-1, 1], or `None`
    /// outside the silhouette.
    fn color_at(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let inside = match self.shape {
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Rect => u.abs() <= 0.92 && v.abs() <= 0.92,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
        };
        if !inside {
            return None;
        }
        let phase = match self.pattern {
            Pattern::Checker { period } => ((u / period).floor() + (v / period).floor()) as i64 % 2 == 0,
            Pattern::Stripes { period, angle } => {
                let (s, c) = angle.sin_cos();
                ((u * c + v * s) / period).floor() as i64 % 2 == 0
            }
            Pattern::Rings { period } => ((u * u + v * v).sqrt() / period).floor() as i64 % 2 == 0,
        };
        Some(if phase { self.color_a } else { self.color_b })
    }
}

fn render(bg: &Background, objects: &[(BBox, &Look)], size: u32) -> RgbImage {
    let s = size as f64;
    // 2x2 supersampling keeps sub-pixel motion visible.
    const OFFS: [f64; 2] = [0.25, 0.75];
    RgbImage::from_fn(size, size, |px, py| {
        let mut acc = [0.0; 3];
        for oy in OFFS {
            for ox in OFFS {
                let (x, y) = (px as f64 + ox, py as f64 + oy);
                let mut c = bg.color_at(x, y, s);
                for (b, look) in objects {
                    let u = (x - b.x) / b.w * 2.0 - 1.0;
                    let v = (y - b.y) / b.h * 2.0 - 1.0;
                    if let Some(oc) = look.color_at(u, v) {
                        c = oc;
                    }
                }
                for k in 0..3 {
                    acc[k] += c[k] * 0.25;
                }
            }
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

fn random_box(rng: &mut impl Rng, size: u32, range: (f64, f64)) -> BBox {
    let s = size as f64;
    let side = rng.random_range(range.0..range.1);
    let aspect: f64 = rng.random_range(0.7f64.ln()..1.4f64.ln()).exp();
    let w = (side * aspect.sqrt()).min(s - 2.0);
    let h = (side / aspect.sqrt()).min(s - 2.0);
    let x = rng.random_range(1.0..(s - w - 1.0).max(1.0 + 1e-9));
    let y = rng.random_range(1.0..(s - h - 1.0).max(1.0 + 1e-9));
    BBox::new(x, y, w, h)
}

/// Aligned pairs: the thermal image is a pure function of the RGB image and
/// the seeded noise stream, so object boxes coincide in both modalities.
pub fn generate_synthetic_pairs(spec: &SynthSpec) -> Vec<SynthPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_pairs)
        .map(|_| {
            let bg = Background::random(&mut rng, spec.image_size);
            let mut object = random_box(&mut rng, spec.image_size, spec.object_size_range);
            if let Some(f) = spec.center_spread {
                let half = spec.image_size as f64 / 2.0;
                let mut pick = |extent: f64| {
                    let c = half + f * 2.0 * half * rng.random_range(-1.0..1.0);
                    c.clamp(extent / 2.0 + 1.0, 2.0 * half - extent / 2.0 - 1.0)
                };
                let (cx, cy) = (pick(object.w), pick(object.h));
                object = BBox::from_center(crate::geometry::Point::new(cx, cy), object.w, object.h);
            }
            let c = object.center();
            let s = spec.image_size as f64;
            let look = Look::random(&mut rng, luminance(bg.color_at(c.x, c.y, s)));
            let distractor = (spec.distractor_prob > 0.0 && rng.random_bool(spec.distractor_prob.min(1.0))).then(|| {
                let side = (object.w * object.h).sqrt() * rng.random_range(0.5..0.8);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = 0.5 * (object.w.max(object.h) + side);
                let p = crate::geometry::Point::new(
                    (c.x + r * angle.cos()).clamp(side / 2.0, s - side / 2.0),
                    (c.y + r * angle.sin()).clamp(side / 2.0, s - side / 2.0),
                );
                (BBox::from_center(p, side, side), Look::random(&mut rng, luminance(bg.color_at(p.x, p.y, s))))
            });
            let mut objects: Vec<(BBox, &Look)> = Vec::new();
            if let Some((b, l)) = &distractor {
                objects.push((*b, l));
            }
            objects.push((object, &look));
            let rgb = render(&bg, &objects, spec.image_size);
            let tir = spec.tir_transform.apply(&rgb, &mut rng);
            SynthPair { rgb, tir, object }
        })
        .collect()
}

/// Stand-in for an external RGB detector: the true box with multiplicative
/// jitter on position and extent.
pub fn simulate_detections(objects: &[BBox], jitter: f64, seed: u64) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    objects
        .iter()
        .map(|b| {
            let c = b.center();
            let w = b.w * (1.0 + jitter * rng.random_range(-1.0..1.0));
            let h = b.h * (1.0 + jitter * rng.random_range(-1.0..1.0));
            let cx = c.x + jitter * b.w * rng.random_range(-1.0..1.0);
            let cy = c.y + jitter * b.h * rng.random_range(-1.0..1.0);
            BBox::from_center(crate::geometry::Point::new(cx, cy), w, h)
        })
        .collect()
}

/// Moving-object sequences over a static background.
pub fn generate_sequences(spec: &SeqSpec) -> Vec<InMemorySequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size as f64;
    (0..spec.n_sequences)
        .map(|si| {
            let bg = Background::random(&mut rng, spec.image_size);
            let start = random_box(&mut rng, spec.image_size, spec.object_size_range);
            let c0 = start.center();
            let look = Look::random(&mut rng, luminance(bg.color_at(c0.x, c0.y, s)));
            let distractor = rng.random_bool(spec.distractor_prob).then(|| {
                let b = random_box(&mut rng, spec.image_size, spec.object_size_range);
                let c = b.center();
                (b, Look::random(&mut rng, luminance(bg.color_at(c.x, c.y, s))))
            });
            let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut vel = (spec.speed * heading.cos(), spec.speed * heading.sin());
            let (mut cx, mut cy) = (c0.x, c0.y);
            let mut log_scale = 0.0f64;
            let mut gt = Vec::with_capacity(spec.n_frames);
            let mut frames = Vec::with_capacity(spec.n_frames);
            let mut max_step = 0.0f64;
            let (mut min_scale, mut max_scale) = (1.0f64, 1.0f64);
            for f in 0..spec.n_frames {
                if f > 0 {
                    vel.0 += 0.3 * spec.speed * gauss(&mut rng);
                    vel.1 += 0.3 * spec.speed * gauss(&mut rng);
                    let norm = vel.0.hypot(vel.1).max(1e-9);
                    let cap = 2.5 * spec.speed;
                    if norm > cap {
                        vel = (vel.0 * cap / norm, vel.1 * cap / norm);
                    }
                    log_scale = (log_scale + spec.scale_drift * gauss(&mut rng)).clamp(-0.35, 0.35);
                    let (nx, ny) = (cx + vel.0, cy + vel.1);
                    max_step = max_step.max((nx - cx).hypot(ny - cy));
                    cx = nx;
                    cy = ny;
                }
                let k = log_scale.exp();
                min_scale = min_scale.min(k);
                max_scale = max_scale.max(k);
                let (w, h) = (start.w * k, start.h * k);
                // bounce off the borders
                if cx - w / 2.0 < 1.0 || cx + w / 2.0 > s - 1.0 {
                    vel.0 = -vel.0;
                    cx = cx.clamp(w / 2.0 + 1.0, s - w / 2.0 - 1.0);
                }
                if cy - h / 2.0 < 1.0 || cy + h / 2.0 > s - 1.0 {
                    vel.1 = -vel.1;
                    cy = cy.clamp(h / 2.0 + 1.0, s - h / 2.0 - 1.0);
                }
                let b = BBox::from_center(crate::geometry::Point::new(cx, cy), w, h);
                let mut objects: Vec<(BBox, &Look)> = Vec::new();
                if let Some((db, dl)) = &distractor {
                    objects.push((*db, dl));
                }
                objects.push((b, &look));
                let rgb = render(&bg, &objects, spec.image_size);
                frames.push(if spec.thermal {
                    Image::Gray(spec.tir_transform.apply(&rgb, &mut rng))
                } else {
                    Image::Rgb(rgb)
                });
                gt.push(b);
            }
            let mut attributes = BTreeSet::new();
            if max_scale / min_scale > 1.3 {
                attributes.insert("scale_variation".to_string());
            }
            if max_step > 2.0 * spec.speed {
                attributes.insert("fast_motion".to_string());
            }
            if distractor.is_some() {
                attributes.insert("distractor".to_string());
            }
            InMemorySequence { name: format!("synth_{:03}", si), frames, gt, attributes }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_collapse_is_exact() {
        let weights = [0.2, 0.7, 0.1];
        let spec = SynthSpec {
            n_pairs: 3,
            tir_transform: TirTransform::identity_collapse(weights),
            ..Default::default()
        };
        for p in generate_synthetic_pairs(&spec) {
            for (c, t) in p.rgb.pixels().zip(p.tir.pixels()) {
                let v = weights[0] * c[0] as f64 + weights[1] * c[1] as f64 + weights[2] * c[2] as f64;
                assert_eq!(t[0], v.round() as u8);
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let spec = SynthSpec { n_pairs: 4, seed: 11, ..Default::default() };
        assert_eq!(generate_synthetic_pairs(&spec), generate_synthetic_pairs(&spec));
        let other = SynthSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_synthetic_pairs(&spec)[0].rgb, generate_synthetic_pairs(&other)[0].rgb);
    }

    #[test]
    fn objects_stay_inside_the_image() {
        for spread in [None, Some(0.1), Some(0.5)] {
            let spec =
                SynthSpec { n_pairs: 500, image_size: 48, object_size_range: (8.0, 30.0), center_spread: spread, ..Default::default() };
            let frame = BBox::new(0.0, 0.0, 48.0, 48.0);
            for p in generate_synthetic_pairs(&spec) {
                assert!(frame.contains_box(&p.object), "{:?}", p.object);
            }
        }
    }

    #[test]
    fn centered_objects_stay_near_the_center() {
        let spec = SynthSpec { n_pairs: 200, center_spread: Some(0.1), ..Default::default() };
        for p in generate_synthetic_pairs(&spec) {
            let c = p.object.center();
            assert!((c.x - 48.0).abs() <= 9.6 + 1e-9 && (c.y - 48.0).abs() <= 9.6 + 1e-9, "{c:?}");
        }
    }

    #[test]
    fn sequences_are_deterministic_and_in_frame() {
        let spec = SeqSpec { n_sequences: 2, n_frames: 6, image_size: 64, object_size_range: (10.0, 16.0), ..Default::default() };
        let a = generate_sequences(&spec);
        let b = generate_sequences(&spec);
        let frame = BBox::new(0.0, 0.0, 64.0, 64.0);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.gt, sb.gt);
            assert_eq!(sa.frames, sb.frames);
            assert_eq!(sa.frames.len(), 6);
            assert!(sa.gt.iter().all(|g| frame.contains_box(g)));
        }
    }
}
