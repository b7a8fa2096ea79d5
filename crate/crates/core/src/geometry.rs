//! Axis-aligned boxes in continuous pixel coordinates, the 4-d box state
//! regressed by the box-estimation head, and per-frame error measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Box as (left, top, width, height). Pixel `i` covers `[i, i + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(c: Point, w: f64, h: f64) -> Self {
        Self::new(c.x - w / 2.0, c.y - h / 2.0, w, h)
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!("{self:?}")))
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Scales all coordinates about the origin.
    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k, self.w * k, self.h * k)
    }

    /// Intersection with `other`, or `None` when the overlap has no area.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }
}

/// Regression encoding `(c_x / w, c_y / h, ln w, ln h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxState(pub [f64; 4]);

impl BoxState {
    pub fn as_array(&self) -> &[f64; 4] {
        &self.0
    }
}

pub fn encode_box_state(b: &BBox) -> Result<BoxState> {
    b.validate()?;
    let c = b.center();
    Ok(BoxState([c.x / b.w, c.y / b.h, b.w.ln(), b.h.ln()]))
}

pub fn decode_box_state(s: &BoxState) -> Result<BBox> {
    if s.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState(format!("{:?}", s.0)));
    }
    let w = s.0[2].exp();
    let h = s.0[3].exp();
    if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
        return Err(Error::InvalidState(format!("extent overflow in {:?}", s.0)));
    }
    Ok(BBox::from_center(Point::new(s.0[0] * w, s.0[1] * h), w, h))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersect(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Center location error in pixels.
pub fn cle(a: &BBox, b: &BBox) -> f64 {
    a.center().distance(b.center())
}

pub fn normalized_cle(pred: &BBox, gt: &BBox) -> Result<f64> {
    gt.validate()?;
    let (p, g) = (pred.center(), gt.center());
    Ok(((p.x - g.x) / gt.w).hypot((p.y - g.y) / gt.h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub cle: f64,
    pub norm_cle: f64,
    pub iou: f64,
}

impl FrameError {
    pub fn between(pred: &BBox, gt: &BBox) -> Result<Self> {
        Ok(Self {
            cle: cle(pred, gt),
            norm_cle: normalized_cle(pred, gt)?,
            iou: iou(pred, gt),
        })
    }
}
