//! Integer pixel rectangles.
//!
//! Boxes are half-open: `[x0, x1) × [y0, y1)`, origin at the page's top-left.
//! Two boxes that only share an edge therefore have zero intersection.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::GeometryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, GeometryError> {
        if x0 >= x1 || y0 >= y1 {
            return Err(GeometryError::Degenerate([x0, y0, x1, y1]));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> u32 {
        self.x0
    }

    pub fn y0(&self) -> u32 {
        self.y0
    }

    pub fn x1(&self) -> u32 {
        self.x1
    }

    pub fn y1(&self) -> u32 {
        self.y1
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn to_array(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Overlap rectangle, or `None` when the boxes are disjoint or tangent.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(BBox { x0, y0, x1, y1 })
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        self.intersection(other).map_or(0, |b| b.area())
    }

    pub fn translate(&self, dx: u32, dy: u32) -> BBox {
        BBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    /// Reading-order key: top-to-bottom, then left-to-right.
    pub fn reading_key(&self) -> (u32, u32, u32, u32) {
        (self.y0, self.x0, self.y1, self.x1)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x0, self.y0, self.x1, self.y1)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x0, y0, x1, y1] = <[u32; 4]>::deserialize(d)?;
        BBox::new(x0, y0, x1, y1).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union; zero for disjoint or edge-tangent boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Smallest box containing both inputs.
pub fn union_bbox(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x0: a.x0.min(b.x0),
        y0: a.y0.min(b.y0),
        x1: a.x1.max(b.x1),
        y1: a.y1.max(b.y1),
    }
}

/// Grows each side by `delta`, clamped to `[0, page_w] × [0, page_h]`.
pub fn expand(b: &BBox, delta: u32, page_w: u32, page_h: u32) -> BBox {
    BBox {
        x0: b.x0.saturating_sub(delta),
        y0: b.y0.saturating_sub(delta),
        x1: b.x1.saturating_add(delta).min(page_w.max(b.x1)),
        y1: b.y1.saturating_add(delta).min(page_h.max(b.y1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Counts member pixels directly.
    fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        let xmax = a.x1.max(b.x1);
        let ymax = a.y1.max(b.y1);
        for y in 0..ymax {
            for x in 0..xmax {
                let (ia, ib) = (a.contains_point(x, y), b.contains_point(x, y));
                inter += u64::from(ia && ib);
                union += u64::from(ia || ib);
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BBox::new(3, 0, 3, 5).is_err());
        assert!(BBox::new(0, 5, 4, 2).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bb(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20, 20, 30, 30)), 0.0);
        assert_eq!(iou(&a, &bb(10, 0, 20, 10)), 0.0, "tangent boxes");
        let half = bb(5, 0, 15, 10);
        assert_eq!(pixel_iou(&a, &half), 1.0 / 3.0);
        assert_eq!(iou(&a, &half), 1.0 / 3.0);
    }

    #[test]
    fn union_examples() {
        let a = bb(0, 0, 2, 2);
        assert_eq!(union_bbox(&a, &a), a);
        assert_eq!(union_bbox(&a, &bb(4, 4, 6, 6)), bb(0, 0, 6, 6));
        assert_eq!(union_bbox(&bb(1, 2, 3, 4), &bb(0, 5, 2, 9)), bb(0, 2, 3, 9));
    }

    #[test]
    fn expand_examples() {
        let b = bb(10, 10, 20, 20);
        assert_eq!(expand(&b, 0, 100, 100), b);
        assert_eq!(expand(&b, 5, 100, 100), bb(5, 5, 25, 25));
        assert_eq!(expand(&bb(2, 2, 20, 20), 5, 100, 100), bb(0, 0, 25, 25));
        assert_eq!(
            expand(&bb(90, 90, 98, 99), 5, 100, 100),
            bb(85, 85, 100, 100)
        );
    }

    #[test]
    fn serializes_as_array() {
        let b = bb(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        assert_eq!(serde_json::from_str::<BBox>("[1,2,3,4]").unwrap(), b);
        assert!(serde_json::from_str::<BBox>("[3,2,3,4]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..30, 0u32..30, 1u32..15, 1u32..15).prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_matches_pixel_oracle(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), pixel_iou(&a, &b));
        }

        #[test]
        fn iou_properties(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert_eq!(v == 1.0, a == b);
        }

        #[test]
        fn union_properties(a in arb_box(), b in arb_box(), c in arb_box()) {
            let ab = union_bbox(&a, &b);
            prop_assert_eq!(ab, union_bbox(&b, &a));
            prop_assert_eq!(union_bbox(&ab, &c), union_bbox(&a, &union_bbox(&b, &c)));
            prop_assert_eq!(union_bbox(&a, &a), a);
            prop_assert!(ab.contains(&a) && ab.contains(&b));
        }

        #[test]
        fn expand_is_monotone(b in arb_box(), d1 in 0u32..20, d2 in 0u32..20) {
            let (lo, hi) = (d1.min(d2), d1.max(d2));
            prop_assert_eq!(expand(&b, 0, 50, 50), b);
            prop_assert!(expand(&b, hi, 50, 50).contains(&expand(&b, lo, 50, 50)));
        }
    }
}
