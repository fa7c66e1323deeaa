//! Axis-aligned normalized boxes and intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::{Result, SvpError};

/// Normalized rectangle `(x1, y1, x2, y2)` with corners in `[0, 1]`.
///
/// Serialized as the 4-element array `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox(pub [f64; 4]);

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox([x1, y1, x2, y2]);
        b.validate()?;
        Ok(b)
    }

    pub fn x1(&self) -> f64 {
        self.0[0]
    }
    pub fn y1(&self) -> f64 {
        self.0[1]
    }
    pub fn x2(&self) -> f64 {
        self.0[2]
    }
    pub fn y2(&self) -> f64 {
        self.0[3]
    }

    pub fn validate(&self) -> Result<()> {
        let [x1, y1, x2, y2] = self.0;
        let in_range = self.0.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c));
        if !in_range || x1 >= x2 || y1 >= y2 {
            return Err(SvpError::InvalidInput(format!(
                "invalid box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2() - self.x1()) * (self.y2() - self.y1())
    }
}

/// Intersection area of two boxes; 0 when disjoint.
pub fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x2().min(b.x2()) - a.x1().max(b.x1());
    let h = a.y2().min(b.y2()) - a.y1().max(b.y1());
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union of two validated boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IoU without re-validating; callers guarantee the boxes are legal.
pub fn iou_unchecked(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_boxes_have_iou_one() {
        let b = BoundingBox::new(0.1, 0.2, 0.5, 0.8).unwrap();
        assert_abs_diff_eq!(iou(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn half_overlap_case() {
        // Unit square against its right half: inter 0.5, union 1.0.
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BoundingBox::new(0.5, 0.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(iou(&a, &b).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn disjoint_boxes_have_iou_zero() {
        let a = BoundingBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
        let b = BoundingBox::new(0.5, 0.5, 0.9, 0.9).unwrap();
        assert_abs_diff_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn invalid_box_is_rejected() {
        let a = BoundingBox([0.4, 0.0, 0.2, 0.2]);
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(iou(&a, &b).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.2, 1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn serializes_as_flat_array() {
        let b = BoundingBox::new(0.1, 0.2, 0.3, 0.4).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0.1,0.2,0.3,0.4]");
    }
}
