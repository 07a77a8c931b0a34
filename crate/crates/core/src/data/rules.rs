//! Exclusive geometric predicate rules used to label synthetic scenes.
//!
//! Boxes are `(x0, y0, x1, y1)` with `y` growing downwards. For an ordered
//! pair (s, o), with `hov` = horizontal overlap / narrower width and `vov`
//! the vertical analogue, the first matching rule wins:
//!
//! | predicate       | rule                                                             |
//! |-----------------|------------------------------------------------------------------|
//! | in              | s lies inside o                                                  |
//! | on              | \|o.y0 − s.y1\| ≤ 2, s.y0 < o.y0, hov ≥ 0.3                      |
//! | above           | o.y0 − s.y1 > 2, hov > 0.3                                       |
//! | under           | o is on s, or o is above s                                       |
//! | behind *        | boxes intersect, neither contains the other, s.depth > o.depth + 0.15 |
//! | in front of *   | boxes intersect, neither contains the other, s.depth < o.depth − 0.15 |
//! | next to *       | horizontal gap in [0, 8] px, vov > 0.3                           |
//! | to the left of  | s.x1 < o.x0                                                      |
//! | to the right of | s.x0 > o.x1                                                      |
//!
//! Rows marked * only exist in the nine-predicate set.

use serde::{Deserialize, Serialize};

use crate::backbone::BoundingBox;

pub const RULE_VERSION: &str = "geometric-rules-1";
pub const TOUCH_TOLERANCE: f64 = 2.0;
pub const MIN_OVERLAP: f64 = 0.3;
pub const NEAR_GAP: f64 = 8.0;
pub const DEPTH_MARGIN: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleSet {
    /// above, in, on, to the left of, to the right of, under.
    Geometric6,
    /// The six geometric predicates plus behind, in front of, next to.
    Spatial9,
}

impl RuleSet {
    pub fn predicates(self) -> &'static [&'static str] {
        match self {
            RuleSet::Geometric6 => &["above", "in", "on", "to the left of", "to the right of", "under"],
            RuleSet::Spatial9 => &[
                "above",
                "behind",
                "in",
                "in front of",
                "next to",
                "on",
                "to the left of",
                "to the right of",
                "under",
            ],
        }
    }
}

/// Box plus synthetic depth (larger = farther from the viewer).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placed {
    pub bbox: BoundingBox,
    pub depth: f64,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn hov(s: &BoundingBox, o: &BoundingBox) -> f64 {
    overlap(s.x0, s.x1, o.x0, o.x1) / s.width().min(o.width())
}

fn vov(s: &BoundingBox, o: &BoundingBox) -> f64 {
    overlap(s.y0, s.y1, o.y0, o.y1) / s.height().min(o.height())
}

fn on(s: &BoundingBox, o: &BoundingBox) -> bool {
    (o.y0 - s.y1).abs() <= TOUCH_TOLERANCE && s.y0 < o.y0 && hov(s, o) >= MIN_OVERLAP
}

fn above(s: &BoundingBox, o: &BoundingBox) -> bool {
    o.y0 - s.y1 > TOUCH_TOLERANCE && hov(s, o) > MIN_OVERLAP
}

fn intersects(s: &BoundingBox, o: &BoundingBox) -> bool {
    overlap(s.x0, s.x1, o.x0, o.x1) > 0.0 && overlap(s.y0, s.y1, o.y0, o.y1) > 0.0
}

/// The unique predicate holding for (s, o), if any.
pub fn relation(rules: RuleSet, s: &Placed, o: &Placed) -> Option<&'static str> {
    let (a, b) = (&s.bbox, &o.bbox);
    if b.contains(a) && a != b {
        return Some("in");
    }
    if on(a, b) {
        return Some("on");
    }
    if above(a, b) {
        return Some("above");
    }
    if on(b, a) || above(b, a) {
        return Some("under");
    }
    if rules == RuleSet::Spatial9 {
        let nested = a.contains(b) || b.contains(a);
        if intersects(a, b) && !nested {
            if s.depth > o.depth + DEPTH_MARGIN {
                return Some("behind");
            }
            if s.depth < o.depth - DEPTH_MARGIN {
                return Some("in front of");
            }
        }
        let gap = (b.x0 - a.x1).max(a.x0 - b.x1);
        if (0.0..=NEAR_GAP).contains(&gap) && vov(a, b) > MIN_OVERLAP {
            return Some("next to");
        }
    }
    if a.x1 < b.x0 {
        return Some("to the left of");
    }
    if a.x0 > b.x1 {
        return Some("to the right of");
    }
    None
}
