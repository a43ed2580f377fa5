//! Floating-point scalar abstraction shared by every numeric routine.

use nalgebra::{ComplexField, RealField};
use num_traits::ToPrimitive;
use rustfft::FftNum;

/// Real scalar usable by the dense linear algebra (`nalgebra`) and the
/// FFT-based solvers (`rustfft`). Implemented for `f32` and `f64`.
pub trait Real: RealField + FftNum + ToPrimitive + Copy + Default {
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(value: f64) -> Self {
        nalgebra::convert(value)
    }

    /// Converts a count into the scalar type.
    #[inline]
    fn from_count(n: usize) -> Self {
        nalgebra::convert(n as f64)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Absolute value. `RealField` and `Signed` both provide `abs`, so call
    /// sites use this name to stay unambiguous.
    #[inline]
    fn magnitude(self) -> Self {
        ComplexField::abs(self)
    }

    /// Tolerance used when checking that kernel weights sum to one.
    fn simplex_tolerance() -> Self {
        let eps = Self::default_epsilon();
        let floor = Self::lit(1e-9);
        let scaled = eps * Self::lit(1e3);
        if scaled > floor {
            scaled
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum<T> {
    sum: T,
    carry: T,
}

impl<T: Real> CompensatedSum<T> {
    pub fn new() -> Self {
        Self {
            sum: T::zero(),
            carry: T::zero(),
        }
    }

    #[inline]
    pub fn add(&mut self, value: T) {
        let t = self.sum + value;
        if self.sum.magnitude() >= value.magnitude() {
            self.carry += (self.sum - t) + value;
        } else {
            self.carry += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> T {
        self.sum + self.carry
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut acc = CompensatedSum::<f64>::new();
        acc.add(1.0);
        for _ in 0..10 {
            acc.add(1e-16);
        }
        acc.add(-1.0);
        assert!((acc.value() - 1e-15).abs() < 1e-30);
    }

    #[test]
    fn simplex_tolerance_depends_on_precision() {
        assert_eq!(f64::simplex_tolerance(), 1e-9);
        assert!(f32::simplex_tolerance() > 1e-5);
    }
}
