//! Gaussian pseudo-label over feature cells and the inverse mapping from a
//! response map back to image coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn::Tensor;

/// Single-channel grid over feature cells. Cell `(row, col)` is centered at
/// `origin + (col * stride, row * stride)` in image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub values: Tensor,
    pub stride: f64,
    pub origin: Point,
}

impl ScoreMap {
    pub fn new(values: Tensor, stride: f64, origin: Point) -> Self {
        assert_eq!(values.c, 1, "score map must be single-channel");
        Self { values, stride, origin }
    }

    pub fn rows(&self) -> usize {
        self.values.h
    }

    pub fn cols(&self) -> usize {
        self.values.w
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values.at(0, row, col)
    }

    pub fn cell_center(&self, row: f64, col: f64) -> Point {
        Point::new(self.origin.x + col * self.stride, self.origin.y + row * self.stride)
    }

    /// Continuous (row, col) of an image point.
    pub fn to_cell(&self, p: Point) -> (f64, f64) {
        ((p.y - self.origin.y) / self.stride, (p.x - self.origin.x) / self.stride)
    }
}

/// Label with unit peak, centered at the sub-cell position of `center`.
pub fn gaussian_label(center: Point, rows: usize, cols: usize, stride: f64, origin: Point, sigma: f64) -> Result<ScoreMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter { name: "sigma", reason: format!("must be > 0, got {sigma}") });
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter { name: "map_shape", reason: "empty map".into() });
    }
    let mut map = ScoreMap::new(Tensor::zeros(1, rows, cols), stride, origin);
    let (v0, u0) = map.to_cell(center);
    let denom = 2.0 * sigma * sigma;
    for r in 0..rows {
        let dv = r as f64 - v0;
        for c in 0..cols {
            let du = c as f64 - u0;
            map.values.data[r * cols + c] = (-(du * du + dv * dv) / denom).exp();
        }
    }
    Ok(map)
}

/// Default label width in cells: a quarter of the target's geometric-mean
/// extent, never below one cell.
pub fn default_sigma(target_w: f64, target_h: f64, stride: f64) -> f64 {
    (0.25 * (target_w * target_h).sqrt() / stride).max(1.0)
}

/// Maximal cell, lexicographically first on ties.
pub fn argmax_cell(map: &ScoreMap) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            let v = map.get(r, c);
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
    }
    best
}

fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
}

/// Image position of the response peak. Interior peaks are refined with
/// separable three-point parabola fits; border peaks are returned as the
/// cell center.
pub fn argmax_to_image(map: &ScoreMap, refine: bool) -> Point {
    let (r, c) = argmax_cell(map);
    let (mut fr, mut fc) = (r as f64, c as f64);
    if refine && r > 0 && c > 0 && r + 1 < map.rows() && c + 1 < map.cols() {
        let v = map.get(r, c);
        fc += parabola_offset(map.get(r, c - 1), v, map.get(r, c + 1));
        fr += parabola_offset(map.get(r - 1, c), v, map.get(r + 1, c));
    }
    map.cell_center(fr, fc)
}
