//! Target-center-location head: a filter predicted from reference features,
//! correlated with projected test features, trained against a Gaussian label.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pool_backward, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::labels::{argmax_to_image, ScoreMap};
use crate::nn::{self, ConvShape, Tensor};
use crate::params::{Gradients, Group, GroupSet};

pub const DEFAULT_MU: f64 = 1e-2;

/// Reference group: predictor `W_p [C*k*k][C]`, `b_p [C*k*k]`.
/// Test group: 1x1 projection `W_z [C][C]`, `b_z [C]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TclHead {
    pub channels: usize,
    pub k: usize,
    pub mu: f64,
    pub reference: Vec<f64>,
    pub test: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub channels: usize,
    pub k: usize,
    /// Layout `[C][k][k]`.
    pub values: Vec<f64>,
}

impl Filter {
    pub fn zeros(channels: usize, k: usize) -> Self {
        Self { channels, k, values: vec![0.0; channels * k * k] }
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    fn shape(&self) -> ConvShape {
        ConvShape { in_c: self.channels, out_c: 1, k: self.k, stride: 1, pad: self.k / 2 }
    }
}

impl TclHead {
    pub fn zeros(channels: usize, k: usize, mu: f64) -> Self {
        let fl = channels * k * k;
        Self { channels, k, mu, reference: vec![0.0; fl * channels + fl], test: vec![0.0; channels * channels + channels] }
    }

    /// Small random predictor, identity projection.
    pub fn init(channels: usize, k: usize, mu: f64, rng: &mut impl Rng) -> Self {
        let mut h = Self::zeros(channels, k, mu);
        let fl = h.filter_len();
        let bound = 0.3 / (channels as f64).sqrt();
        for v in &mut h.reference[..fl * channels] {
            *v = rng.random_range(-bound..bound);
        }
        for c in 0..channels {
            h.test[c * channels + c] = 1.0;
        }
        h
    }

    pub fn filter_len(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn predictor(&self) -> (&[f64], &[f64]) {
        self.reference.split_at(self.filter_len() * self.channels)
    }

    fn projection(&self) -> (&[f64], &[f64]) {
        self.test.split_at(self.channels * self.channels)
    }

    fn proj_shape(&self) -> ConvShape {
        ConvShape { in_c: self.channels, out_c: self.channels, k: 1, stride: 1, pad: 0 }
    }

    fn check(&self, fm: &FeatureMap) -> Result<()> {
        if fm.channels() != self.channels {
            return Err(Error::Shape(format!("tcl head expects {} channels, got {}", self.channels, fm.channels())));
        }
        Ok(())
    }
}

pub fn predict_filter(head: &TclHead, reference: &FeatureMap, roi: &BBox) -> Result<Filter> {
    head.check(reference)?;
    let pooled = reference.pool(&reference.roi_weights(roi));
    let (w, b) = head.predictor();
    Ok(Filter { channels: head.channels, k: head.k, values: nn::linear(w, b, &pooled) })
}

/// Test-branch projection of features.
pub fn project(head: &TclHead, test: &FeatureMap) -> Result<FeatureMap> {
    head.check(test)?;
    let (w, b) = head.projection();
    let values = nn::conv2d(&test.values, w, Some(b), head.proj_shape());
    Ok(FeatureMap { values, stride: test.stride, origin: test.origin })
}

/// Same-size cross-correlation of `filter` over `features`.
pub fn response(filter: &Filter, features: &FeatureMap) -> Result<ScoreMap> {
    if features.channels() != filter.channels {
        return Err(Error::Shape(format!("filter has {} channels, features {}", filter.channels, features.channels())));
    }
    let r = nn::conv2d(&features.values, &filter.values, None, filter.shape());
    Ok(ScoreMap::new(r, features.stride, features.origin))
}

/// Response of the full head: filter over projected test features.
pub fn head_response(head: &TclHead, filter: &Filter, test: &FeatureMap) -> Result<ScoreMap> {
    response(filter, &project(head, test)?)
}

pub struct TclItem<'a> {
    pub reference: &'a FeatureMap,
    pub roi: BBox,
    pub test: &'a FeatureMap,
    pub label: &'a ScoreMap,
    /// Groups this item may send gradient to.
    pub trainable: GroupSet,
}

pub struct TclItemOutput {
    pub response: ScoreMap,
    pub loss: f64,
    pub d_reference: Option<Tensor>,
    pub d_test: Option<Tensor>,
}

pub struct TclBatchOutput {
    pub items: Vec<TclItemOutput>,
    /// Mean per-item loss.
    pub loss: f64,
    pub grads: Gradients,
}

/// Batch loss `mean_i ( |f_i * z_i - g_i|^2 + mu |f_i|^2 )` and its gradient
/// with respect to each item's trainable groups. With `feature_grads` the
/// gradients with respect to the input feature maps are returned as well.
pub fn tcl_loss(head: &TclHead, items: &[TclItem], feature_grads: bool) -> Result<TclBatchOutput> {
    let n = items.len().max(1) as f64;
    let union = items.iter().fold(GroupSet::EMPTY, |a, it| a.union(it.trainable));
    let mut grads = Gradients::new();
    if union.contains(Group::TclReference) {
        grads.insert(Group::TclReference, vec![0.0; head.reference.len()]);
    }
    if union.contains(Group::TclTest) {
        grads.insert(Group::TclTest, vec![0.0; head.test.len()]);
    }
    let (wp, _) = head.predictor();
    let (wz, _) = head.projection();
    let fl = head.filter_len();
    let c = head.channels;
    let mut outs = Vec::with_capacity(items.len());
    let mut total = 0.0;
    for it in items {
        head.check(it.reference)?;
        let weights = it.reference.roi_weights(&it.roi);
        let pooled = it.reference.pool(&weights);
        let filter = predict_filter(head, it.reference, &it.roi)?;
        let z = project(head, it.test)?;
        let r = response(&filter, &z)?;
        if (r.rows(), r.cols()) != (it.label.rows(), it.label.cols()) {
            return Err(Error::Shape(format!(
                "label {}x{} vs response {}x{}",
                it.label.rows(),
                it.label.cols(),
                r.rows(),
                r.cols()
            )));
        }
        let mut resid = r.values.clone();
        for (a, g) in resid.data.iter_mut().zip(&it.label.values.data) {
            *a -= g;
        }
        let loss = resid.sq_norm() + head.mu * filter.sq_norm();
        total += loss;

        let want_ref = it.trainable.contains(Group::TclReference) || feature_grads;
        let want_test = it.trainable.contains(Group::TclTest) || feature_grads;
        let mut d_reference = None;
        let mut d_test = None;
        if want_ref || want_test {
            let dr = resid.scaled(2.0 / n);
            let cg = nn::conv2d_backward(&z.values, &filter.values, &dr, filter.shape(), want_test);
            if want_ref {
                let mut df = cg.weight;
                for (d, f) in df.iter_mut().zip(&filter.values) {
                    *d += 2.0 * head.mu * f / n;
                }
                let mut gw = vec![0.0; fl * c];
                let mut gb = vec![0.0; fl];
                let d_pooled = nn::linear_backward(wp, &pooled, &df, &mut gw, &mut gb, feature_grads);
                if it.trainable.contains(Group::TclReference) {
                    let g = grads.get_mut(&Group::TclReference).unwrap();
                    for (a, v) in g.iter_mut().zip(gw.iter().chain(&gb)) {
                        *a += v;
                    }
                }
                if let Some(dp) = d_pooled {
                    d_reference = Some(pool_backward(it.reference.values.shape(), &weights, &dp));
                }
            }
            if want_test {
                let dz = cg.input.unwrap();
                let pg = nn::conv2d_backward(&it.test.values, wz, &dz, head.proj_shape(), feature_grads);
                if it.trainable.contains(Group::TclTest) {
                    let g = grads.get_mut(&Group::TclTest).unwrap();
                    for (a, v) in g.iter_mut().zip(pg.weight.iter().chain(&pg.bias)) {
                        *a += v;
                    }
                }
                d_test = pg.input;
            }
        }
        outs.push(TclItemOutput { response: r, loss, d_reference, d_test });
    }
    Ok(TclBatchOutput { items: outs, loss: total / n, grads })
}

fn objective(filter: &[f64], z: &FeatureMap, label: &ScoreMap, mu: f64, shape: ConvShape) -> f64 {
    let r = nn::conv2d(&z.values, filter, None, shape);
    let data: f64 = r.data.iter().zip(&label.values.data).map(|(a, b)| (a - b) * (a - b)).sum();
    data + mu * filter.iter().map(|v| v * v).sum::<f64>()
}

/// Steepest descent with exact line search on `|f * z - g|^2 + mu |f|^2`,
/// starting from `filter`, over already projected features `z`.
pub fn adapt_filter(filter: &Filter, z: &FeatureMap, label: &ScoreMap, mu: f64, steps: usize) -> Result<Filter> {
    if z.channels() != filter.channels {
        return Err(Error::Shape(format!("filter has {} channels, features {}", filter.channels, z.channels())));
    }
    let shape = filter.shape();
    let mut f = filter.clone();
    for _ in 0..steps {
        let mut resid = nn::conv2d(&z.values, &f.values, None, shape);
        for (a, g) in resid.data.iter_mut().zip(&label.values.data) {
            *a -= g;
        }
        // half gradient: A^T (A f - g) + mu f
        let mut d = nn::conv2d_backward(&z.values, &f.values, &resid, shape, false).weight;
        for (dv, fv) in d.iter_mut().zip(&f.values) {
            *dv += mu * fv;
        }
        let dd: f64 = d.iter().map(|v| v * v).sum();
        if dd == 0.0 {
            break;
        }
        let ad = nn::conv2d(&z.values, &d, None, shape);
        let alpha = dd / (ad.sq_norm() + mu * dd);
        if !alpha.is_finite() {
            break;
        }
        for (fv, dv) in f.values.iter_mut().zip(&d) {
            *fv -= alpha * dv;
        }
    }
    Ok(f)
}

/// Predicts a filter from the reference features and refines it for `steps`
/// iterations against `label` on the projected reference features.
pub fn inner_loop_adapt(head: &TclHead, reference: &FeatureMap, roi: &BBox, label: &ScoreMap, steps: usize) -> Result<Filter> {
    let f0 = predict_filter(head, reference, roi)?;
    if steps == 0 {
        return Ok(f0);
    }
    let z = project(head, reference)?;
    adapt_filter(&f0, &z, label, head.mu, steps)
}

/// Objective value used by [`adapt_filter`], exposed for diagnostics.
pub fn adapt_objective(filter: &Filter, z: &FeatureMap, label: &ScoreMap, mu: f64) -> f64 {
    objective(&filter.values, z, label, mu, filter.shape())
}

/// Image position of the response peak on the test features.
pub fn locate_center(head: &TclHead, filter: &Filter, test: &FeatureMap) -> Result<Point> {
    Ok(argmax_to_image(&head_response(head, filter, test)?, true))
}
