//! Cropping, resampling and tensor conversion for 8-bit RGB and thermal
//! images.

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Tir,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Rgb => Modality::Tir,
            Modality::Tir => Modality::Rgb,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Tir => "TIR",
        }
    }
}

/// Either modality, as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Image {
    Rgb(RgbImage),
    Gray(GrayImage),
}

impl Image {
    pub fn dimensions(&self) -> (u32, u32) {
        match self {
            Image::Rgb(i) => i.dimensions(),
            Image::Gray(i) => i.dimensions(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        match self {
            Image::Rgb(i) => rgb_to_tensor(i),
            Image::Gray(i) => gray_to_tensor(i),
        }
    }
}

#[inline]
fn norm(v: u8) -> f64 {
    (v as f64 / 255.0 - 0.5) * 2.0
}

/// RGB to a 3-channel tensor in [-1, 1].
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            let i = t.idx(c, y as usize, x as usize);
            t.data[i] = norm(p[c]);
        }
    }
    t
}

/// Thermal image replicated across three channels so both modalities share
/// one backbone input layout.
pub fn gray_to_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        let v = norm(p[0]);
        for c in 0..3 {
            let i = t.idx(c, y as usize, x as usize);
            t.data[i] = v;
        }
    }
    t
}

/// Symmetric reflection of an index into `0..n`.
#[inline]
pub fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

#[inline]
fn bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let xa = reflect(x0, w);
    let xb = reflect(x0 + 1, w);
    let ya = reflect(y0, h);
    let yb = reflect(y0 + 1, h);
    let top = plane[ya * w + xa] * (1.0 - fx) + plane[ya * w + xb] * fx;
    let bot = plane[yb * w + xa] * (1.0 - fx) + plane[yb * w + xb] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Samples `rect` (continuous pixel coordinates) onto an `out_w x out_h`
/// grid with bilinear interpolation; samples outside the source reflect.
pub fn sample_crop(src: &Tensor, rect: &BBox, out_w: usize, out_h: usize) -> Tensor {
    let mut out = Tensor::zeros(src.c, out_h, out_w);
    let sx = rect.w / out_w as f64;
    let sy = rect.h / out_h as f64;
    for c in 0..src.c {
        let plane = src.plane(c);
        for oy in 0..out_h {
            // pixel centers sit at +0.5
            let y = rect.y + (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..out_w {
                let x = rect.x + (ox as f64 + 0.5) * sx - 0.5;
                let i = out.idx(c, oy, ox);
                out.data[i] = bilinear(plane, src.w, src.h, x, y);
            }
        }
    }
    out
}

/// Integer crop of an RGB image. Caller guarantees the rect lies inside.
pub fn crop_rgb(img: &RgbImage, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
    image::imageops::crop_imm(img, x, y, w, h).to_image()
}

pub fn crop_gray(img: &GrayImage, x: u32, y: u32, w: u32, h: u32) -> GrayImage {
    image::imageops::crop_imm(img, x, y, w, h).to_image()
}

/// Corner-aligned bilinear weights: output sample `i` reads source position
/// `i * (n_in - 1) / (n_out - 1)`.
fn corner_positions(n_in: u32, n_out: u32) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let pos = if n_out == 1 { 0.0 } else { i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64 };
            let a = pos.floor() as usize;
            let b = (a + 1).min(n_in as usize - 1);
            (a, b, pos - a as f64)
        })
        .collect()
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn resize_rgb(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let xs = corner_positions(w, out_w);
    let ys = corner_positions(h, out_h);
    RgbImage::from_fn(out_w, out_h, |ox, oy| {
        let (xa, xb, fx) = xs[ox as usize];
        let (ya, yb, fy) = ys[oy as usize];
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let g = |x: usize, y: usize| img.get_pixel(x as u32, y as u32)[c] as f64;
            let top = g(xa, ya) * (1.0 - fx) + g(xb, ya) * fx;
            let bot = g(xa, yb) * (1.0 - fx) + g(xb, yb) * fx;
            *out = to_u8(top * (1.0 - fy) + bot * fy);
        }
        Rgb(px)
    })
}

pub fn resize_gray(img: &GrayImage, out_w: u32, out_h: u32) -> GrayImage {
    let (w, h) = img.dimensions();
    let xs = corner_positions(w, out_w);
    let ys = corner_positions(h, out_h);
    GrayImage::from_fn(out_w, out_h, |ox, oy| {
        let (xa, xb, fx) = xs[ox as usize];
        let (ya, yb, fy) = ys[oy as usize];
        let g = |x: usize, y: usize| img.get_pixel(x as u32, y as u32)[0] as f64;
        let top = g(xa, ya) * (1.0 - fx) + g(xb, ya) * fx;
        let bot = g(xa, yb) * (1.0 - fx) + g(xb, yb) * fx;
        Luma([to_u8(top * (1.0 - fy) + bot * fy)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
        assert_eq!(reflect(3, 5), 3);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn identity_crop_reproduces_source() {
        let src = Tensor::from_vec(1, 3, 4, (0..12).map(|v| v as f64).collect());
        let out = sample_crop(&src, &BBox::new(0.0, 0.0, 4.0, 3.0), 4, 3);
        assert_eq!(out, src);
        let shifted = sample_crop(&src, &BBox::new(1.0, 1.0, 2.0, 2.0), 2, 2);
        assert_eq!(shifted.data, vec![5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn corner_aligned_resize_keeps_corners() {
        let img = GrayImage::from_fn(3, 3, |x, y| Luma([(x * 10 + y * 100) as u8]));
        let big = resize_gray(&img, 5, 5);
        assert_eq!(big.get_pixel(0, 0)[0], 0);
        assert_eq!(big.get_pixel(4, 0)[0], 20);
        assert_eq!(big.get_pixel(4, 4)[0], 220);
        assert_eq!(big.get_pixel(2, 2)[0], 110);
        assert_eq!(resize_gray(&img, 3, 3), img);
    }

    #[test]
    fn gray_tensor_replicates_channels() {
        let img = GrayImage::from_fn(2, 1, |x, _| Luma([if x == 0 { 0 } else { 255 }]));
        let t = gray_to_tensor(&img);
        assert_eq!(t.shape(), (3, 1, 2));
        for c in 0..3 {
            assert_eq!(t.at(c, 0, 0), -1.0);
            assert_eq!(t.at(c, 0, 1), 1.0);
        }
    }
}
