//! Blur kernels: nonnegative grids whose weights sum to one.

use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::tensor::Image;

/// A point of the kernel simplex S.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    weights: Image<T>,
}

impl<T: Real> Kernel<T> {
    /// Validates nonnegativity and unit sum.
    pub fn new(weights: Image<T>) -> Result<Self> {
        if let Some(pos) = weights.as_slice().iter().position(|&w| w < T::zero()) {
            return invalid(format!(
                "kernel weight at ({}, {}) is negative",
                pos / weights.cols(),
                pos % weights.cols()
            ));
        }
        let total = weights.sum();
        if (total - T::one()).magnitude() > T::simplex_tolerance() {
            return invalid(format!(
                "kernel weights sum to {}, expected 1",
                total.to_f64_lossy()
            ));
        }
        Ok(Self { weights })
    }

    /// Rescales a nonnegative, nonzero grid onto the simplex.
    pub fn normalized(weights: Image<T>) -> Result<Self> {
        if weights.as_slice().iter().any(|&w| w < T::zero()) {
            return invalid("kernel weights must be nonnegative");
        }
        let total = weights.sum();
        if total <= T::zero() {
            return invalid("kernel weights must not all be zero");
        }
        Self::new(weights.scaled(T::one() / total))
    }

    /// Builds a kernel from a row-major vector that is already on the simplex.
    pub fn from_vec(rows: usize, cols: usize, weights: Vec<T>) -> Result<Self> {
        Self::new(Image::new(rows, cols, weights)?)
    }

    /// The impulse δ at the center of a `rows × cols` grid (rounded toward
    /// the top-left for even sizes).
    pub fn delta(rows: usize, cols: usize) -> Self {
        let mut w = Image::zeros(rows, cols);
        w.set((rows - 1) / 2, (cols - 1) / 2, T::one());
        Self { weights: w }
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            weights: Image::filled(rows, cols, T::one() / T::from_count(rows * cols)),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }

    #[inline]
    pub fn as_image(&self) -> &Image<T> {
        &self.weights
    }

    pub fn into_image(self) -> Image<T> {
        self.weights
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        self.weights.as_slice()
    }

    /// Zero-pads the kernel to a larger grid, keeping it centered.
    pub fn padded_to(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows < self.rows() || cols < self.cols() {
            return invalid("cannot pad a kernel to a smaller grid");
        }
        let r0 = (rows - self.rows()) / 2;
        let c0 = (cols - self.cols()) / 2;
        Ok(Self {
            weights: self.weights.embed(rows, cols, r0, c0)?,
        })
    }

    pub fn cast<U: Real>(&self) -> Result<Kernel<U>> {
        Kernel::normalized(self.weights.cast())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_and_unnormalized() {
        let neg = Image::<f64>::from_rows(&[[1.2, -0.2]]).unwrap();
        assert!(Kernel::new(neg).is_err());
        let unnorm = Image::<f64>::from_rows(&[[0.5, 0.4]]).unwrap();
        assert!(Kernel::new(unnorm.clone()).is_err());
        let k = Kernel::normalized(unnorm).unwrap();
        assert!((k.as_image().sum() - 1.0).abs() < 1e-15);
        assert!(Kernel::normalized(Image::<f64>::zeros(2, 2)).is_err());
    }

    #[test]
    fn delta_and_uniform() {
        let d = Kernel::<f64>::delta(3, 3);
        assert_eq!(d.as_image().get(1, 1), 1.0);
        let u = Kernel::<f64>::uniform(3, 3);
        assert!((u.as_image().sum() - 1.0).abs() < 1e-15);
        let p = d.padded_to(5, 5).unwrap();
        assert_eq!(p.as_image().get(2, 2), 1.0);
    }
}
