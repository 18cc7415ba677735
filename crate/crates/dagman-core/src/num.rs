//! Scalar abstraction so the model math can run in f32 (training) and
//! f64 (finite-difference oracles) from the same code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    num_traits::Float + Sum + Send + Sync + Debug + Display + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
