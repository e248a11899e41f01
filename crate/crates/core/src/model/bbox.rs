//! Axis-aligned box geometry in integer pixel coordinates.
//!
//! Boxes are stored as `(x, y, w, h)` with a top-left origin: a box covers
//! pixels `x..x+w-1` horizontally and `y..y+h-1` vertically. Areas use the
//! continuous convention `w * h`, which on integer boxes coincides with
//! counting covered pixels.

use serde::de::{self, SeqAccess, Visitor};
use serde::ser::SerializeTuple;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

/// Axis-aligned bounding box in pixels, top-left origin.
///
/// Invariants `w > 0 && h > 0` are enforced by [`BoundingBox::new`];
/// containment within an owning image is checked at dataset validation,
/// not here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    /// Build a box, rejecting degenerate (zero width or height) extents.
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self, DegenerateBox> {
        if w == 0 || h == 0 {
            return Err(DegenerateBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Exclusive right edge, `x + w`.
    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    /// Exclusive bottom edge, `y + h`.
    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    /// Continuous-convention area `w * h`.
    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    /// Box center in continuous coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    /// True when the box lies entirely inside a `width x height` image.
    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.right() <= width as u64 && self.bottom() <= height as u64
    }

    /// True when `other` lies entirely inside this box.
    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// True when the continuous point `(px, py)` falls inside the half-open
    /// extent `[x, x+w) x [y, y+h)`.
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x as f64
            && px < self.right() as f64
            && py >= self.y as f64
            && py < self.bottom() as f64
    }

    /// Intersection area with `other` under the continuous convention.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let ix = overlap_1d(self.x as u64, self.right(), other.x as u64, other.right());
        let iy = overlap_1d(self.y as u64, self.bottom(), other.y as u64, other.bottom());
        ix as f64 * iy as f64
    }

    /// Shifts the box into diagram coordinates given a window origin.
    pub fn offset_by(&self, dx: u32, dy: u32) -> BoundingBox {
        BoundingBox {
            x: self.x + dx,
            y: self.y + dy,
            w: self.w,
            h: self.h,
        }
    }

    /// Clamps the box so it lies inside a `width x height` image, preserving
    /// extent where possible and truncating at the borders otherwise.
    pub fn clamped_to(&self, width: u32, height: u32) -> Option<BoundingBox> {
        if width == 0 || height == 0 || self.x >= width || self.y >= height {
            return None;
        }
        let w = self.w.min(width - self.x);
        let h = self.h.min(height - self.y);
        BoundingBox::new(self.x, self.y, w, h).ok()
    }
}

fn overlap_1d(a0: u64, a1: u64, b0: u64, b1: u64) -> u64 {
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    hi.saturating_sub(lo)
}

/// Intersection-over-union of two boxes; 0 when disjoint, 1 for identical.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Error for zero-extent boxes rejected by [`BoundingBox::new`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("degenerate bounding box ({x},{y},{w},{h}): width and height must be > 0")]
pub struct DegenerateBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

// Serialized as the 4-element array [x, y, w, h] used throughout the
// canonical dataset schema.
impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut tuple = serializer.serialize_tuple(4)?;
        tuple.serialize_element(&self.x)?;
        tuple.serialize_element(&self.y)?;
        tuple.serialize_element(&self.w)?;
        tuple.serialize_element(&self.h)?;
        tuple.end()
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct BoxVisitor;

        impl<'de> Visitor<'de> for BoxVisitor {
            type Value = BoundingBox;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a [x, y, w, h] array of non-negative integers")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
                let x = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let y = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                let w = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(2, &self))?;
                let h = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(3, &self))?;
                if seq.next_element::<serde::de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(5, &self));
                }
                // Zero extents are accepted here so dataset validation can
                // report them against the owning symbol id.
                Ok(BoundingBox { x, y, w, h })
            }
        }

        deserializer.deserialize_tuple(4, BoxVisitor)
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x, self.y, self.w, self.h)
    }
}
