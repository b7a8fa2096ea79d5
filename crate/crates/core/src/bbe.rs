//! Bounding-box-estimation head: reference-side channel modulation, test-side
//! embedding, their product pooled into moments and regressed to a box state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pool_backward, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{decode_box_state, iou, BBox, BoxState};
use crate::nn::{self, ConvShape, Tensor};
use crate::params::{Gradients, Group, GroupSet};

pub const DEFAULT_NU: f64 = 1e-2;
/// Moments kept per fused channel: mass, first and second moments along x
/// and y.
pub const MOMENTS: usize = 5;

/// Reference group: `W_theta [D][C]`, `b_theta [D]`.
/// Test group: `W_phi [D][C][k][k]`, `b_phi [D]`.
/// Regressor: `W1 [H][5D]`, `b1 [H]`, `W2 [4][H]`, `b2 [4]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BbeHead {
    pub channels: usize,
    pub dim: usize,
    pub embed_k: usize,
    pub hidden: usize,
    pub nu: f64,
    pub reference: Vec<f64>,
    pub test: Vec<f64>,
    pub psi: Vec<f64>,
}

impl BbeHead {
    pub fn zeros(channels: usize, dim: usize, embed_k: usize, hidden: usize, nu: f64) -> Self {
        let q = MOMENTS * dim;
        Self {
            channels,
            dim,
            embed_k,
            hidden,
            nu,
            reference: vec![0.0; dim * channels + dim],
            test: vec![0.0; dim * channels * embed_k * embed_k + dim],
            psi: vec![0.0; hidden * q + hidden + 4 * hidden + 4],
        }
    }

    pub fn init(channels: usize, dim: usize, embed_k: usize, hidden: usize, nu: f64, rng: &mut impl Rng) -> Self {
        let mut h = Self::zeros(channels, dim, embed_k, hidden, nu);
        let mut fill = |v: &mut [f64], fan_in: usize| {
            let bound = (3.0 / fan_in as f64).sqrt();
            v.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
        };
        let (wt, bt) = h.reference.split_at_mut(dim * channels);
        fill(wt, channels);
        // start with a positive gate so the product is not sign-scrambled
        bt.iter_mut().for_each(|v| *v = 1.0);
        let wl = dim * channels * embed_k * embed_k;
        fill(&mut h.test[..wl], channels * embed_k * embed_k);
        let q = MOMENTS * dim;
        fill(&mut h.psi[..hidden * q], q);
        let w2 = hidden * q + hidden;
        fill(&mut h.psi[w2..w2 + 4 * hidden], hidden);
        h
    }

    fn theta(&self) -> (&[f64], &[f64]) {
        self.reference.split_at(self.dim * self.channels)
    }

    fn phi(&self) -> (&[f64], &[f64]) {
        self.test.split_at(self.dim * self.channels * self.embed_k * self.embed_k)
    }

    fn psi_parts(&self) -> [&[f64]; 4] {
        let q = MOMENTS * self.dim;
        let h = self.hidden;
        let (w1, rest) = self.psi.split_at(h * q);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(4 * h);
        [w1, b1, w2, b2]
    }

    fn embed_shape(&self) -> ConvShape {
        ConvShape { in_c: self.channels, out_c: self.dim, k: self.embed_k, stride: 1, pad: self.embed_k / 2 }
    }

    fn check(&self, fm: &FeatureMap) -> Result<()> {
        if fm.channels() != self.channels {
            return Err(Error::Shape(format!("bbe head expects {} channels, got {}", self.channels, fm.channels())));
        }
        Ok(())
    }

    pub fn theta_sq_norm(&self) -> f64 {
        self.reference.iter().map(|v| v * v).sum()
    }
}

/// Channel modulation vector from the target region of the reference
/// features.
pub fn modulate(head: &BbeHead, reference: &FeatureMap, roi: &BBox) -> Result<Vec<f64>> {
    head.check(reference)?;
    let (w, b) = head.theta();
    Ok(nn::linear(w, b, &reference.pool(&reference.roi_weights(roi))))
}

pub fn embed_test(head: &BbeHead, test: &FeatureMap) -> Result<FeatureMap> {
    head.check(test)?;
    let (w, b) = head.phi();
    let mut e = nn::conv2d(&test.values, w, Some(b), head.embed_shape());
    nn::relu_inplace(&mut e);
    Ok(FeatureMap { values: e, stride: test.stride, origin: test.origin })
}

fn coords(n: usize) -> Vec<f64> {
    (0..n).map(|i| (2 * i + 1) as f64 / n as f64 - 1.0).collect()
}

/// Per channel: mean, and means of `u*x`, `u*y`, `u*x^2`, `u*y^2` with cell
/// coordinates normalized to (-1, 1).
pub fn moment_pool(u: &Tensor) -> Vec<f64> {
    let (xs, ys) = (coords(u.w), coords(u.h));
    let n = (u.w * u.h) as f64;
    let mut out = Vec::with_capacity(MOMENTS * u.c);
    for c in 0..u.c {
        let plane = u.plane(c);
        let mut m = [0.0; MOMENTS];
        for (y, yv) in ys.iter().enumerate() {
            for (x, xv) in xs.iter().enumerate() {
                let v = plane[y * u.w + x];
                m[0] += v;
                m[1] += v * xv;
                m[2] += v * yv;
                m[3] += v * xv * xv;
                m[4] += v * yv * yv;
            }
        }
        out.extend(m.iter().map(|s| s / n));
    }
    out
}

fn moment_pool_backward(shape: (usize, usize, usize), dq: &[f64]) -> Tensor {
    let (c, h, w) = shape;
    let (xs, ys) = (coords(w), coords(h));
    let n = (w * h) as f64;
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let d = &dq[MOMENTS * ch..MOMENTS * (ch + 1)];
        let plane = out.plane_mut(ch);
        for (y, yv) in ys.iter().enumerate() {
            for (x, xv) in xs.iter().enumerate() {
                plane[y * w + x] = (d[0] + d[1] * xv + d[2] * yv + d[3] * xv * xv + d[4] * yv * yv) / n;
            }
        }
    }
    out
}

fn fuse(m: &[f64], e: &Tensor) -> Tensor {
    let mut u = e.clone();
    for (c, mv) in m.iter().enumerate() {
        u.plane_mut(c).iter_mut().for_each(|v| *v *= mv);
    }
    u
}

fn regress(head: &BbeHead, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [w1, b1, w2, b2] = head.psi_parts();
    let mut h = nn::linear(w1, b1, q);
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let out = nn::linear(w2, b2, &h);
    (h, out)
}

/// Box state of the object relative to the test input, given a precomputed
/// modulation vector.
pub fn predict_with_modulation(head: &BbeHead, modulation: &[f64], test: &FeatureMap) -> Result<BoxState> {
    if modulation.len() != head.dim {
        return Err(Error::Shape(format!("modulation length {} vs dim {}", modulation.len(), head.dim)));
    }
    let e = embed_test(head, test)?;
    let (_, out) = regress(head, &moment_pool(&fuse(modulation, &e.values)));
    Ok(BoxState([out[0], out[1], out[2], out[3]]))
}

pub fn predict_state(head: &BbeHead, reference: &FeatureMap, roi: &BBox, test: &FeatureMap) -> Result<BoxState> {
    predict_with_modulation(head, &modulate(head, reference, roi)?, test)
}

pub struct BbeItem<'a> {
    pub reference: &'a FeatureMap,
    pub roi: BBox,
    pub test: &'a FeatureMap,
    pub target: BoxState,
    pub trainable: GroupSet,
}

pub struct BbeItemOutput {
    pub prediction: BoxState,
    pub residual: f64,
    pub d_reference: Option<Tensor>,
    pub d_test: Option<Tensor>,
}

pub struct BbeBatchOutput {
    pub items: Vec<BbeItemOutput>,
    /// Mean squared residual plus `nu |theta|^2`.
    pub loss: f64,
    pub grads: Gradients,
}

fn accumulate(grads: &mut Gradients, group: Group, parts: &[&[f64]]) {
    if let Some(g) = grads.get_mut(&group) {
        for (a, v) in g.iter_mut().zip(parts.iter().flat_map(|p| p.iter())) {
            *a += v;
        }
    }
}

pub fn bbe_loss(head: &BbeHead, items: &[BbeItem], feature_grads: bool) -> Result<BbeBatchOutput> {
    let n = items.len().max(1) as f64;
    let union = items.iter().fold(GroupSet::EMPTY, |a, it| a.union(it.trainable));
    let mut grads = Gradients::new();
    for (g, len) in [(Group::BbeReference, head.reference.len()), (Group::BbeTest, head.test.len()), (Group::BbePsi, head.psi.len())] {
        if union.contains(g) {
            grads.insert(g, vec![0.0; len]);
        }
    }
    let (wt, _) = head.theta();
    let (wphi, _) = head.phi();
    let [w1, _, w2, _] = head.psi_parts();
    let (d, c, hd) = (head.dim, head.channels, head.hidden);
    let q_len = MOMENTS * d;
    let mut outs = Vec::with_capacity(items.len());
    let mut total = 0.0;
    for it in items {
        head.check(it.reference)?;
        head.check(it.test)?;
        let weights = it.reference.roi_weights(&it.roi);
        let pooled = it.reference.pool(&weights);
        let m = nn::linear(wt, &head.theta().1, &pooled);
        let e = embed_test(head, it.test)?.values;
        let u = fuse(&m, &e);
        let q = moment_pool(&u);
        let (h, out) = regress(head, &q);
        let r: Vec<f64> = out.iter().zip(&it.target.0).map(|(a, b)| a - b).collect();
        let residual: f64 = r.iter().map(|v| v * v).sum();
        total += residual;

        let want_psi = it.trainable.contains(Group::BbePsi);
        let want_ref = it.trainable.contains(Group::BbeReference) || feature_grads;
        let want_test = it.trainable.contains(Group::BbeTest) || feature_grads;
        let mut d_reference = None;
        let mut d_test = None;
        if want_psi || want_ref || want_test {
            let dout: Vec<f64> = r.iter().map(|v| 2.0 * v / n).collect();
            let (mut gw2, mut gb2) = (vec![0.0; 4 * hd], vec![0.0; 4]);
            let mut dh = nn::linear_backward(w2, &h, &dout, &mut gw2, &mut gb2, true).unwrap();
            for (dv, hv) in dh.iter_mut().zip(&h) {
                if *hv <= 0.0 {
                    *dv = 0.0;
                }
            }
            let (mut gw1, mut gb1) = (vec![0.0; hd * q_len], vec![0.0; hd]);
            let dq = nn::linear_backward(w1, &q, &dh, &mut gw1, &mut gb1, want_ref || want_test);
            if want_psi {
                accumulate(&mut grads, Group::BbePsi, &[&gw1, &gb1, &gw2, &gb2]);
            }
            if let Some(dq) = dq {
                let du = moment_pool_backward(u.shape(), &dq);
                if want_ref {
                    let dm: Vec<f64> = (0..d).map(|ch| du.plane(ch).iter().zip(e.plane(ch)).map(|(a, b)| a * b).sum()).collect();
                    let (mut gw, mut gb) = (vec![0.0; d * c], vec![0.0; d]);
                    let dp = nn::linear_backward(wt, &pooled, &dm, &mut gw, &mut gb, feature_grads);
                    if it.trainable.contains(Group::BbeReference) {
                        accumulate(&mut grads, Group::BbeReference, &[&gw, &gb]);
                    }
                    d_reference = dp.map(|dp| pool_backward(it.reference.values.shape(), &weights, &dp));
                }
                if want_test {
                    let mut de = fuse(&m, &du);
                    nn::relu_backward_inplace(&mut de, &e);
                    let cg = nn::conv2d_backward(&it.test.values, wphi, &de, head.embed_shape(), feature_grads);
                    if it.trainable.contains(Group::BbeTest) {
                        accumulate(&mut grads, Group::BbeTest, &[&cg.weight, &cg.bias]);
                    }
                    d_test = cg.input;
                }
            }
        }
        outs.push(BbeItemOutput { prediction: BoxState([out[0], out[1], out[2], out[3]]), residual, d_reference, d_test });
    }
    if let Some(g) = grads.get_mut(&Group::BbeReference) {
        for (a, t) in g.iter_mut().zip(&head.reference) {
            *a += 2.0 * head.nu * t;
        }
    }
    Ok(BbeBatchOutput { items: outs, loss: total / n + head.nu * head.theta_sq_norm(), grads })
}

/// Features of one crop together with where the crop came from.
pub struct CropView {
    pub features: FeatureMap,
    /// Cropped region in frame coordinates.
    pub region: BBox,
    /// Size of the network input the region was resampled to.
    pub input_size: (usize, usize),
}

impl CropView {
    pub fn to_frame(&self, b: &BBox) -> BBox {
        let sx = self.region.w / self.input_size.0 as f64;
        let sy = self.region.h / self.input_size.1 as f64;
        BBox::new(self.region.x + b.x * sx, self.region.y + b.y * sy, b.w * sx, b.h * sy)
    }
}

/// Prior plus `n - 1` jittered copies: center within +-10% of the box size,
/// scale within +-0.1 in log space.
pub fn jitter_candidates(prior: &BBox, n: usize, rng: &mut impl Rng) -> Vec<BBox> {
    let mut out = vec![*prior];
    let c = prior.center();
    for _ in 1..n {
        let dx = rng.random_range(-0.1..0.1) * prior.w;
        let dy = rng.random_range(-0.1..0.1) * prior.h;
        let s = rng.random_range(-0.1f64..0.1).exp();
        out.push(BBox::from_center(crate::geometry::Point::new(c.x + dx, c.y + dy), prior.w * s, prior.h * s));
    }
    out
}

/// Index of the box with the highest mean IoU against the others; the
/// first wins ties.
pub fn consensus_index(boxes: &[BBox]) -> usize {
    if boxes.len() < 2 {
        return 0;
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, a) in boxes.iter().enumerate() {
        let s: f64 = boxes.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, b)| iou(a, b)).sum();
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Predicts a box from each jittered candidate's crop and returns the
/// consensus. `view` produces the features of the crop for a candidate.
pub fn refine_box<F>(
    head: &BbeHead,
    modulation: &[f64],
    prior: &BBox,
    n_jitter: usize,
    rng: &mut impl Rng,
    mut view: F,
) -> Result<BBox>
where
    F: FnMut(&BBox) -> Result<CropView>,
{
    let mut decoded = Vec::with_capacity(n_jitter.max(1));
    for cand in jitter_candidates(prior, n_jitter.max(1), rng) {
        let v = view(&cand)?;
        let s = predict_with_modulation(head, modulation, &v.features)?;
        decoded.push(v.to_frame(&decode_box_state(&s)?));
    }
    Ok(decoded[consensus_index(&decoded)])
}
