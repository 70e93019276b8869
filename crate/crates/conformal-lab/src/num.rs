//! Scalar abstraction for the core containers.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable in datasets, scores and weighted measures.
///
/// Implemented by `f32` and `f64`. The engine itself works in `f64`; the
/// generic bound exists so the data and measure types can be reused at
/// other precisions.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum<Self> + Debug + Display + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Sum<T> + Debug + Display + Send + Sync + 'static
{
}
