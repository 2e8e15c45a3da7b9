use serde::{Deserialize, Serialize};

use crate::error::{Result, ShefuError};

/// Inclusive-exclusive pixel box inside a `width × height` image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub width: f32,
    pub height: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32, width: f32, height: f32) -> Result<Self> {
        let b = Self {
            x1,
            y1,
            x2,
            y2,
            width,
            height,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x1, self.y1, self.x2, self.y2, self.width, self.height]
            .iter()
            .all(|v| v.is_finite())
            && 0.0 <= self.x1
            && self.x1 < self.x2
            && self.x2 <= self.width
            && 0.0 <= self.y1
            && self.y1 < self.y2
            && self.y2 <= self.height;
        if ok {
            Ok(())
        } else {
            Err(ShefuError::Contract(format!("invalid bounding box {self:?}")))
        }
    }

    pub fn w(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn h(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        f64::from(self.w()) * f64::from(self.h())
    }

    pub fn center_x(&self) -> f32 {
        0.5 * (self.x1 + self.x2)
    }

    /// The whole image.
    pub fn full(width: f32, height: f32) -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: width,
            y2: height,
            width,
            height,
        }
    }
}

/// Intersection over union. Zero-area boxes are rejected.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(ShefuError::Contract(format!(
            "iou of a degenerate box: {a:?} / {b:?}"
        )));
    }
    let iw = (f64::from(a.x2.min(b.x2)) - f64::from(a.x1.max(b.x1))).max(0.0);
    let ih = (f64::from(a.y2.min(b.y2)) - f64::from(a.y1.max(b.y1))).max(0.0);
    let inter = iw * ih;
    Ok(inter / (a.area() + b.area() - inter))
}

/// A detected region: precomputed visual feature plus its box.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub visual: Vec<f32>,
    pub bbox: BBox,
}

impl RegionFeature {
    pub fn zeros(d_f: usize, width: f32, height: f32) -> Self {
        Self {
            visual: vec![0.0; d_f],
            bbox: BBox::full(width, height),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2, 10.0, 10.0).unwrap()
    }

    #[test]
    fn identical_boxes() {
        assert_eq!(iou(&bx(1.0, 1.0, 4.0, 5.0), &bx(1.0, 1.0, 4.0, 5.0)).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_boxes() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_overlap_is_one_seventh() {
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        assert!(BBox::new(1.0, 1.0, 1.0, 3.0, 10.0, 10.0).is_err());
        let flat = BBox {
            x1: 1.0,
            y1: 1.0,
            x2: 1.0,
            y2: 3.0,
            width: 10.0,
            height: 10.0,
        };
        assert!(iou(&flat, &bx(0.0, 0.0, 2.0, 2.0)).is_err());
    }

    #[test]
    fn out_of_image_box_is_rejected() {
        assert!(BBox::new(0.0, 0.0, 11.0, 3.0, 10.0, 10.0).is_err());
        assert!(BBox::new(-1.0, 0.0, 1.0, 3.0, 10.0, 10.0).is_err());
    }
}
