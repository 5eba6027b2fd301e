//! Scalar abstraction for the analytic formulas.
//!
//! The closed-form probabilities and overhead fractions only need field
//! arithmetic, so they are written once against [`Scalar`] and evaluated in
//! `f32`, `f64` or an exact rational ([`crate::Exact`]).

use std::fmt::Debug;

use num_traits::{FromPrimitive, Num};

/// Field-like scalar: `+ - * /`, ordering and conversion from integers.
pub trait Scalar: Num + FromPrimitive + Clone + PartialOrd + Debug {
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar type")
    }
}

impl<T> Scalar for T where T: Num + FromPrimitive + Clone + PartialOrd + Debug {}

/// Floating-point scalar, needed where square roots appear.
pub trait FloatScalar: Scalar + num_traits::Float {}

impl<T> FloatScalar for T where T: Scalar + num_traits::Float {}
