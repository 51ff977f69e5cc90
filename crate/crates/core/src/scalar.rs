//! Scalar abstraction for the dense linear-algebra kernels.
//!
//! The decompositions in [`crate::linalg`] and the matrix-level optimizer
//! primitives in [`crate::opt`] are written against this trait so they work
//! for both `f32` and `f64`. The network/training stack is pinned to `f64`
//! through the aliases at the crate root, matching the on-disk formats.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar usable by the matrix kernels.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant, panicking only for exotic scalar types
    /// that cannot represent ordinary constants (never for f32/f64).
    fn from_f64_const(value: f64) -> Self {
        Self::from_f64(value).expect("constant not representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
