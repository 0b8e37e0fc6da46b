//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Real floating-point scalar the estimators are generic over.
///
/// Implemented for `f32` and `f64`. Tolerances that are quoted as absolute
/// numbers are converted with [`Scalar::lit`] and then floored at a multiple
/// of machine epsilon so single precision stays usable.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts a literal. Panics only if the literal is not representable,
    /// which cannot happen for finite `f64` values and `f32`/`f64` targets.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    /// `max(v, k * epsilon)`: a tolerance that never drops below what the
    /// precision can resolve.
    #[inline]
    fn tol(v: f64, k: f64) -> Self {
        Self::lit(v).max(Self::epsilon() * Self::lit(k))
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Neumaier-compensated running sum. Summation order is fixed by the caller,
/// so results are reproducible bit for bit.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum<T> {
    sum: T,
    carry: T,
}

impl<T: Scalar> CompensatedSum<T> {
    pub fn new() -> Self {
        Self {
            sum: T::zero(),
            carry: T::zero(),
        }
    }

    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry = self.carry + ((self.sum - t) + x);
        } else {
            self.carry = self.carry + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum + self.carry
    }
}

impl<T: Scalar> FromIterator<T> for CompensatedSum<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}
