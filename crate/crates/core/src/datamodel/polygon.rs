//! Text-region polygons, bounding rectangles and mask rasterization.
//!
//! Rasterization samples each pixel at its centre and uses the even-odd rule.

use serde::{Deserialize, Serialize};

use super::image::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub points: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        let p = Polygon { points };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 3 {
            return Err(Error::validation(format!("polygon needs at least 3 points, got {}", self.points.len())));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("polygon has non-finite coordinates"));
        }
        Ok(())
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn from_rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon { points: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]] }
    }

    pub fn bbox(&self) -> Rect {
        let mut r = Rect { x0: f64::INFINITY, y0: f64::INFINITY, x1: f64::NEG_INFINITY, y1: f64::NEG_INFINITY };
        for &[x, y] in &self.points {
            r.x0 = r.x0.min(x);
            r.y0 = r.y0.min(y);
            r.x1 = r.x1.max(x);
            r.y1 = r.y1.max(y);
        }
        r
    }

    /// Points clamped into `[0, width] x [0, height]`.
    pub fn clamped(&self, width: usize, height: usize) -> Self {
        Polygon {
            points: self
                .points
                .iter()
                .map(|&[x, y]| [x.clamp(0.0, width as f64), y.clamp(0.0, height as f64)])
                .collect(),
        }
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let pts = &self.points;
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let ([xi, yi], [xj, yj]) = (pts[i], pts[j]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// Absolute shoelace area.
    pub fn area(&self) -> f64 {
        let pts = &self.points;
        let mut s = 0.0;
        for i in 0..pts.len() {
            let [x0, y0] = pts[i];
            let [x1, y1] = pts[(i + 1) % pts.len()];
            s += x0 * y1 - x1 * y0;
        }
        s.abs() / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn union(&self, o: &Rect) -> Rect {
        Rect { x0: self.x0.min(o.x0), y0: self.y0.min(o.y0), x1: self.x1.max(o.x1), y1: self.y1.max(o.y1) }
    }

    pub fn iou(&self, o: &Rect) -> f64 {
        let inter = Rect { x0: self.x0.max(o.x0), y0: self.y0.max(o.y0), x1: self.x1.min(o.x1), y1: self.y1.min(o.y1) };
        let i = inter.area();
        let u = self.area() + o.area() - i;
        if u <= 0.0 {
            0.0
        } else {
            i / u
        }
    }

    /// Grows each side by `frac` of the corresponding extent.
    pub fn padded(&self, frac: f64) -> Rect {
        let (px, py) = (self.width() * frac, self.height() * frac);
        Rect { x0: self.x0 - px, y0: self.y0 - py, x1: self.x1 + px, y1: self.y1 + py }
    }

    pub fn clamped(&self, width: usize, height: usize) -> Rect {
        let (w, h) = (width as f64, height as f64);
        Rect {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        }
    }

    /// Source coordinates of the centre of pixel `(v, u)` of an `out_h x out_w` grid laid over the rect.
    #[inline]
    pub fn grid_point(&self, v: usize, u: usize, out_h: usize, out_w: usize) -> (f64, f64) {
        (
            self.x0 + (u as f64 + 0.5) * self.width() / out_w as f64,
            self.y0 + (v as f64 + 0.5) * self.height() / out_h as f64,
        )
    }
}

/// Union of the polygons rasterized on an `out_h x out_w` grid laid over `rect`.
pub fn rasterize(polygons: &[&Polygon], rect: &Rect, out_h: usize, out_w: usize) -> Mask {
    Mask::from_fn(out_h, out_w, |v, u| {
        let (x, y) = rect.grid_point(v, u, out_h, out_w);
        polygons.iter().any(|p| p.contains(x, y))
    })
}
