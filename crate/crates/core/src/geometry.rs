use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x1, y1, x2, y2)` in canvas units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.x1 < self.x2) || !(self.y1 < self.y2) {
            return Err(Error::Input(format!("invalid box {self:?}")));
        }
        Ok(())
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

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from([x1, y1, x2, y2]: [f64; 4]) -> Result<Self> {
        BBox::new(x1, y1, x2, y2)
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn hand_geometry() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        // touching edges do not overlap
        assert_eq!(iou(&a, &b(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn rejects_inverted_boxes() {
        assert!(BBox::new(5.0, 0.0, 1.0, 3.0).is_err());
        assert!(BBox::new(0.0, 0.0, 0.0, 3.0).is_err());
        assert!(serde_json::from_str::<BBox>("[3.0, 0.0, 1.0, 1.0]").is_err());
    }

    prop_compose! {
        fn any_box()(x in 0.0..90.0, y in 0.0..90.0, w in 0.5..40.0, h in 0.5..40.0) -> BBox {
            b(x, y, x + w, y + h)
        }
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in any_box(), c in any_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
        }
    }
}
