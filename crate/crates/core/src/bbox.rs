//! Axis-aligned boxes in pixel coordinates (`x1 < x2`, `y1 < y2`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn centre(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + o.area() - inter)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox { x1: self.x1 * s, y1: self.y1 * s, x2: self.x2 * s, y2: self.y2 * s }
    }

    /// Clips to `[0, w] × [0, h]`; `None` if nothing is left.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        };
        b.is_valid().then_some(b)
    }

    /// Smallest box covering both.
    pub fn union(&self, o: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
            x2: self.x2.max(o.x2),
            y2: self.y2.max(o.y2),
        }
    }
}
