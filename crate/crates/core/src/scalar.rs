//! Floating-point abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used by the policy, entropy, advantage and update math.
///
/// Implemented for `f32` and `f64`. The rollout engine and trainer run on
/// `f64`; the generic code paths exist so the formulas can be checked at
/// both precisions.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot hold.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Smallest probability allowed before taking a logarithm.
    fn prob_floor() -> Self;
}

impl Scalar for f32 {
    fn prob_floor() -> Self {
        f32::MIN_POSITIVE
    }
}

impl Scalar for f64 {
    fn prob_floor() -> Self {
        1e-300
    }
}
