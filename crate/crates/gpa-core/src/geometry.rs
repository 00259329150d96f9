//! Axis-aligned bounding-box arithmetic.
//!
//! Coordinates follow the continuous corner convention: a box is the set
//! `[x_min, x_max] x [y_min, y_max]` and its area is
//! `(x_max - x_min) * (y_max - y_min)`. Zero-area boxes are valid values
//! (IoU treats them as empty sets) but are rejected wherever a relation
//! graph is built over them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Build a box, rejecting inverted or non-finite corners.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let vals = [x_min, y_min, x_max, y_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "box corners must be finite, got ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        if x_min > x_max || y_min > y_max {
            return Err(Error::InvalidInput(format!(
                "inverted box: ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    pub fn union_area(&self, other: &BBox) -> f64 {
        self.area() + other.area() - self.intersection_area(other)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Scale about the origin by `s > 0`.
    pub fn scaled(&self, s: f64) -> BBox {
        BBox {
            x_min: self.x_min * s,
            y_min: self.y_min * s,
            x_max: self.x_max * s,
            y_max: self.y_max * s,
        }
    }
}

/// Intersection over union. Total on valid boxes: a pair of zero-area
/// boxes (union area 0) maps to 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_identity() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn iou_overlapping_hand_oracle() {
        // intersection 1, union 4 + 4 - 1 = 7
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15, "got {v}");
    }

    #[test]
    fn iou_degenerate_pair_is_zero() {
        let a = bx(1.0, 1.0, 1.0, 1.0);
        let b = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn center_distance_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(center_distance(&a, &a), 0.0);
        assert_eq!(center_distance(&a, &bx(3.0, 0.0, 5.0, 2.0)), 3.0);
        // centers (1,1) and (4,5): a 3-4-5 triangle
        assert_eq!(center_distance(&a, &bx(3.0, 4.0, 5.0, 6.0)), 5.0);
    }

    #[test]
    fn inverted_box_rejected() {
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, f64::NAN).is_err());
    }

    /// Pixel-rasterization IoU for integer boxes: exact on a unit grid.
    fn raster_iou(a: &BBox, b: &BBox, grid: usize) -> f64 {
        let covers = |bb: &BBox, px: usize, py: usize| {
            bb.x_min <= px as f64
                && (px + 1) as f64 <= bb.x_max
                && bb.y_min <= py as f64
                && (py + 1) as f64 <= bb.y_max
        };
        let mut inter = 0u64;
        let mut union = 0u64;
        for px in 0..grid {
            for py in 0..grid {
                let ina = covers(a, px, py);
                let inb = covers(b, px, py);
                if ina && inb {
                    inter += 1;
                }
                if ina || inb {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn int_box() -> impl Strategy<Value = BBox> {
        (0u32..63, 0u32..63).prop_flat_map(|(x0, y0)| {
            ((x0 + 1)..=63, (y0 + 1)..=63).prop_map(move |(x1, y1)| {
                BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap()
            })
        })
    }

    fn real_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.01..40.0f64, 0.01..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in real_box(), b in real_box()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_is_one(a in real_box()) {
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn translation_invariance(a in real_box(), b in real_box(),
                                  dx in -20.0..20.0f64, dy in -20.0..20.0f64) {
            let (ta, tb) = (a.translated(dx, dy), b.translated(dx, dy));
            prop_assert!((iou(&a, &b) - iou(&ta, &tb)).abs() < 1e-12);
            prop_assert!((center_distance(&a, &b) - center_distance(&ta, &tb)).abs() < 1e-9);
        }

        #[test]
        fn scale_covariance(a in real_box(), b in real_box(), s in 0.1..10.0f64) {
            let (sa, sb) = (a.scaled(s), b.scaled(s));
            prop_assert!((iou(&a, &b) - iou(&sa, &sb)).abs() < 1e-9);
            let d = center_distance(&a, &b);
            prop_assert!((center_distance(&sa, &sb) - s * d).abs() < 1e-9 * (1.0 + s * d));
        }

        #[test]
        fn raster_oracle_agrees(a in int_box(), b in int_box()) {
            prop_assert!((iou(&a, &b) - raster_iou(&a, &b, 64)).abs() < 1e-12);
        }
    }
}
