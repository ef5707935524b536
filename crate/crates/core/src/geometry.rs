//! Normalized bounding-box geometry.
//!
//! Coordinates are normalized to `[0, 1]` with the origin at the top-left
//! corner. Absolute pixel coordinates exist only at tool and export
//! boundaries; everything internal works on this convention-free form.

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{Serialize, SerializeTuple, Serializer};
use serde::Deserialize;
use thiserror::Error;

use crate::scalar::Coord;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    /// A coordinate fell outside `[0, 1]` or was not a finite number.
    #[error("bbox coordinate out of range: {0}")]
    OutOfRange(String),
    /// The box has zero width or height after clamping and reordering.
    #[error("degenerate bbox: zero area")]
    DegenerateBox,
}

/// Axis-aligned box in normalized coordinates with strictly positive area.
///
/// Construction is validating; a held value always satisfies
/// `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Coord> BBox<T> {
    /// Validates raw corners as-is (no clamping, no reordering).
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self, GeometryError> {
        let (lo, hi) = (T::zero(), T::one());
        for (name, v) in [("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)] {
            if !v.is_finite() || v < lo || v > hi {
                return Err(GeometryError::OutOfRange(format!("{name}={v:?}")));
            }
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::DegenerateBox);
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Clamps arbitrary reals into a valid box: coordinates are clamped to
    /// `[0, 1]` and corners reordered so `x1 < x2`, `y1 < y2`. Fails with
    /// [`GeometryError::DegenerateBox`] when the clamped area is zero.
    pub fn clamp(raw: [T; 4]) -> Result<Self, GeometryError> {
        let unit = |v: T| v.max(T::zero()).min(T::one());
        let [a, b, c, d] = raw;
        let (a, b, c, d) = (unit(a), unit(b), unit(c), unit(d));
        let (x1, x2) = (a.min(c), a.max(c));
        let (y1, y2) = (b.min(d), b.max(d));
        if x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::DegenerateBox);
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> T {
        self.x1
    }

    pub fn y1(&self) -> T {
        self.y1
    }

    pub fn x2(&self) -> T {
        self.x2
    }

    pub fn y2(&self) -> T {
        self.y2
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    /// Boundary-inclusive containment: true iff `inner` lies entirely within
    /// `self`, touching edges allowed.
    pub fn contains(&self, inner: &Self) -> bool {
        self.x1 <= inner.x1 && self.y1 <= inner.y1 && inner.x2 <= self.x2 && inner.y2 <= self.y2
    }

    /// Intersection area over union area, in `[0, 1]`.
    pub fn iou(&self, other: &Self) -> T {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(T::zero());
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(T::zero());
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        inter / union
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

// The interchange form of a bbox is a plain 4-array [x1, y1, x2, y2].
impl<T: Coord + Serialize> Serialize for BBox<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut t = serializer.serialize_tuple(4)?;
        t.serialize_element(&self.x1)?;
        t.serialize_element(&self.y1)?;
        t.serialize_element(&self.x2)?;
        t.serialize_element(&self.y2)?;
        t.end()
    }
}

impl<'de, T: Coord + Deserialize<'de>> Deserialize<'de> for BBox<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ArrayVisitor<T>(std::marker::PhantomData<T>);

        impl<'de, T: Coord + Deserialize<'de>> Visitor<'de> for ArrayVisitor<T> {
            type Value = BBox<T>;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a 4-element array [x1, y1, x2, y2]")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
                let mut vals = [T::zero(); 4];
                for (i, slot) in vals.iter_mut().enumerate() {
                    *slot = seq
                        .next_element()?
                        .ok_or_else(|| de::Error::invalid_length(i, &self))?;
                }
                if seq.next_element::<T>()?.is_some() {
                    return Err(de::Error::invalid_length(5, &self));
                }
                let [x1, y1, x2, y2] = vals;
                BBox::new(x1, y1, x2, y2).map_err(de::Error::custom)
            }
        }

        deserializer.deserialize_tuple(4, ArrayVisitor(std::marker::PhantomData))
    }
}
