//! Axis-aligned box geometry in abstract pixel units.

use serde::{Deserialize, Serialize};

/// A box as (x, y, w, h) with the origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGeom {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxGeom {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxGeom { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection-over-union. Zero for disjoint boxes, one for identical
    /// boxes; symmetric by construction.
    pub fn iou(&self, other: &BoxGeom) -> f64 {
        if self == other {
            // Exact: (x + w) - x need not round back to w.
            return 1.0;
        }
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let b = BoxGeom::new(3.0, 4.0, 10.0, 20.0);
        assert_eq!(b.iou(&b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BoxGeom::new(0.0, 0.0, 5.0, 5.0);
        let b = BoxGeom::new(10.0, 10.0, 5.0, 5.0);
        assert_eq!(a.iou(&b), 0.0);
        assert_eq!(b.iou(&a), 0.0);
    }

    #[test]
    fn iou_partial_overlap_matches_area_arithmetic() {
        // (0,0,2,2) vs (1,1,2,2): intersection 1, union 4+4-1=7.
        let a = BoxGeom::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxGeom::new(1.0, 1.0, 2.0, 2.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(a.iou(&b), b.iou(&a));
    }

    #[test]
    fn iou_touching_edges_is_zero() {
        let a = BoxGeom::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxGeom::new(2.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&b), 0.0);
    }
}
