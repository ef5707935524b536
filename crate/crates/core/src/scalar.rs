//! Scalar abstraction for normalized coordinate and loss math.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point scalar for normalized geometry and masked-loss math:
/// `f32` or `f64`.
pub trait Coord: Float + FromPrimitive + NumCast + Debug + Send + Sync + 'static {}

impl<T> Coord for T where T: Float + FromPrimitive + NumCast + Debug + Send + Sync + 'static {}
