//! Small convolutional feature extractor shared by both branches.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::imaging::reflect;
use crate::nn::{self, ConvShape, Tensor};

pub use crate::pretrain::{pretrain_examples, pretrain_rgb, PretrainConfig, Teacher};

const MAGIC: &[u8; 4] = b"TDBB";
pub const BACKBONE_VERSION: u32 = 1;

/// Stack of 3x3 stride-2 convolutions with ReLU after each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Channel counts, input first.
    pub channels: Vec<usize>,
}

impl Default for Arch {
    fn default() -> Self {
        Self { channels: vec![3, 16, 32, 32] }
    }
}

impl Arch {
    pub fn layers(&self) -> impl Iterator<Item = ConvShape> + '_ {
        self.channels.windows(2).map(|w| ConvShape { in_c: w[0], out_c: w[1], k: 3, stride: 2, pad: 1 })
    }

    pub fn stride(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.weight_len() + l.out_c).sum()
    }

    pub fn descriptor(&self) -> String {
        let chans: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format!("conv3x3s2relu:{}", chans.join("-"))
    }

    pub fn parse_descriptor(s: &str) -> Option<Self> {
        let rest = s.strip_prefix("conv3x3s2relu:")?;
        let channels = rest.split('-').map(|c| c.parse().ok()).collect::<Option<Vec<usize>>>()?;
        (channels.len() >= 2 && channels.iter().all(|&c| c > 0)).then_some(Self { channels })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub arch: Arch,
    /// Per layer: weights `[out][in][3][3]` then biases.
    pub values: Vec<f64>,
}

/// Multi-channel feature grid. Cell `(row, col)` is centered at
/// `origin + stride * (col, row)` in input pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: f64,
    pub origin: Point,
}

impl FeatureMap {
    pub fn new(values: Tensor, stride: f64) -> Self {
        // a cell's receptive-field center is the center of input pixel
        // stride * index
        Self { values, stride, origin: Point::new(0.5, 0.5) }
    }

    pub fn channels(&self) -> usize {
        self.values.c
    }

    pub fn rows(&self) -> usize {
        self.values.h
    }

    pub fn cols(&self) -> usize {
        self.values.w
    }

    pub fn cell_center(&self, row: f64, col: f64) -> Point {
        Point::new(self.origin.x + col * self.stride, self.origin.y + row * self.stride)
    }

    /// Pooling weights over cells, proportional to the overlap of each
    /// cell's footprint with `roi`; they sum to one. A box that misses the
    /// grid falls back to the nearest cell.
    pub fn roi_weights(&self, roi: &BBox) -> Vec<f64> {
        let (rows, cols) = (self.rows(), self.cols());
        let half = self.stride / 2.0;
        let mut w = vec![0.0; rows * cols];
        let mut total = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let p = self.cell_center(r as f64, c as f64);
                let cell = BBox::new(p.x - half, p.y - half, self.stride, self.stride);
                if let Some(i) = cell.intersect(roi) {
                    w[r * cols + c] = i.area();
                    total += i.area();
                }
            }
        }
        if total > 0.0 {
            w.iter_mut().for_each(|v| *v /= total);
        } else {
            let ctr = roi.center();
            let r = (((ctr.y - self.origin.y) / self.stride).round().max(0.0) as usize).min(rows - 1);
            let c = (((ctr.x - self.origin.x) / self.stride).round().max(0.0) as usize).min(cols - 1);
            w[r * cols + c] = 1.0;
        }
        w
    }

    /// Per-channel weighted sum over cells.
    pub fn pool(&self, weights: &[f64]) -> Vec<f64> {
        (0..self.channels())
            .map(|c| self.values.plane(c).iter().zip(weights).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Gradient of [`FeatureMap::pool`] with respect to the features.
pub fn pool_backward(shape: (usize, usize, usize), weights: &[f64], d_pooled: &[f64]) -> Tensor {
    let (c, h, w) = shape;
    let mut out = Tensor::zeros(c, h, w);
    for (ch, d) in d_pooled.iter().enumerate() {
        for (o, wt) in out.plane_mut(ch).iter_mut().zip(weights) {
            *o = d * wt;
        }
    }
    out
}

impl BackboneParams {
    pub fn init(arch: Arch, rng: &mut impl Rng) -> Self {
        let mut values = Vec::with_capacity(arch.param_count());
        for l in arch.layers() {
            let bound = (6.0 / (l.in_c * 9) as f64).sqrt();
            // f32-representable so checkpoints reproduce the weights exactly
            values.extend((0..l.weight_len()).map(|_| rng.random_range(-bound..bound) as f32 as f64));
            values.extend(std::iter::repeat_n(0.0, l.out_c));
        }
        Self { arch, values }
    }

    pub fn zeros(arch: Arch) -> Self {
        let n = arch.param_count();
        Self { arch, values: vec![0.0; n] }
    }

    fn layer_params(&self) -> Vec<(ConvShape, std::ops::Range<usize>, std::ops::Range<usize>)> {
        let mut off = 0;
        self.arch
            .layers()
            .map(|l| {
                let w = off..off + l.weight_len();
                let b = w.end..w.end + l.out_c;
                off = b.end;
                (l, w, b)
            })
            .collect()
    }

    /// Rounds every value to the nearest f32 so the checkpoint format
    /// stores it exactly.
    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Reflection-pads the right and bottom edges up to a multiple of `m`.
pub fn pad_to_multiple(input: &Tensor, m: usize) -> Tensor {
    let h = input.h.div_ceil(m) * m;
    let w = input.w.div_ceil(m) * m;
    if h == input.h && w == input.w {
        return input.clone();
    }
    let mut out = Tensor::zeros(input.c, h, w);
    for c in 0..input.c {
        for y in 0..h {
            let sy = reflect(y as isize, input.h);
            for x in 0..w {
                let sx = reflect(x as isize, input.w);
                let i = out.idx(c, y, x);
                out.data[i] = input.at(c, sy, sx);
            }
        }
    }
    out
}

/// Post-activation outputs of every layer, kept for the backward pass.
pub struct Trace {
    input: Tensor,
    acts: Vec<Tensor>,
}

pub fn extract(params: &BackboneParams, input: &Tensor) -> FeatureMap {
    extract_traced(params, input).0
}

pub fn extract_traced(params: &BackboneParams, input: &Tensor) -> (FeatureMap, Trace) {
    let x = pad_to_multiple(input, params.arch.stride());
    let mut acts: Vec<Tensor> = Vec::new();
    for (shape, w, b) in params.layer_params() {
        let prev = acts.last().unwrap_or(&x);
        let mut y = nn::conv2d(prev, &params.values[w], Some(&params.values[b]), shape);
        nn::relu_inplace(&mut y);
        acts.push(y);
    }
    let fm = FeatureMap::new(acts.last().unwrap().clone(), params.arch.stride() as f64);
    (fm, Trace { input: x, acts })
}

/// Accumulates the parameter gradient of a scalar whose gradient with
/// respect to the output features is `grad_out`.
pub fn backward(params: &BackboneParams, trace: &Trace, grad_out: &Tensor, grads: &mut [f64]) {
    let layers = params.layer_params();
    let mut g = grad_out.clone();
    for (i, (shape, w, b)) in layers.iter().enumerate().rev() {
        nn::relu_backward_inplace(&mut g, &trace.acts[i]);
        let input = if i == 0 { &trace.input } else { &trace.acts[i - 1] };
        let cg = nn::conv2d_backward(input, &params.values[w.clone()], &g, *shape, i > 0);
        for (a, v) in grads[w.clone()].iter_mut().zip(&cg.weight) {
            *a += v;
        }
        for (a, v) in grads[b.clone()].iter_mut().zip(&cg.bias) {
            *a += v;
        }
        if let Some(gi) = cg.input {
            g = gi;
        }
    }
}

pub fn backbone_to_bytes(params: &BackboneParams) -> Vec<u8> {
    let desc = params.arch.descriptor();
    let mut out = Vec::with_capacity(16 + desc.len() + 4 * params.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BACKBONE_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("non-utf8 string".into()))
    }
}

pub(crate) fn read_backbone(r: &mut Reader, expected: Option<&Arch>) -> Result<BackboneParams> {
    if r.take(4)? != MAGIC {
        return Err(Error::Corrupt("not a backbone checkpoint".into()));
    }
    let version = r.u32()?;
    if version != BACKBONE_VERSION {
        return Err(Error::Version { expected: BACKBONE_VERSION, found: version });
    }
    let desc = r.string()?;
    let arch = Arch::parse_descriptor(&desc).ok_or_else(|| Error::Corrupt(format!("bad descriptor `{desc}`")))?;
    if let Some(e) = expected {
        if *e != arch {
            return Err(Error::Descriptor { expected: e.descriptor(), found: desc });
        }
    }
    let n = r.u64()? as usize;
    if n != arch.param_count() {
        return Err(Error::Corrupt(format!("{n} values for `{desc}`, expected {}", arch.param_count())));
    }
    let values = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    Ok(BackboneParams { arch, values })
}

pub fn save_backbone(params: &BackboneParams, path: &Path) -> Result<()> {
    fs::write(path, backbone_to_bytes(params))?;
    Ok(())
}

/// Loads a backbone checkpoint, optionally insisting on an architecture.
pub fn load_backbone(path: &Path, expected: Option<&Arch>) -> Result<BackboneParams> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    let p = read_backbone(&mut r, expected)?;
    if r.pos != buf.len() {
        return Err(Error::Corrupt("trailing bytes".into()));
    }
    Ok(p)
}
