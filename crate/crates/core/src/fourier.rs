//! 2D discrete Fourier transforms on periodic canvases.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;
use crate::tensor::Image;

pub(crate) struct Fft2<T: Real> {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    fn transform(&self, data: &mut [Complex<T>], rows: &dyn Fft<T>, cols: &dyn Fft<T>) {
        debug_assert_eq!(data.len(), self.rows * self.cols);
        rows.process(data);
        let mut column = vec![Complex::new(T::zero(), T::zero()); self.rows];
        for c in 0..self.cols {
            for r in 0..self.rows {
                column[r] = data[r * self.cols + c];
            }
            cols.process(&mut column);
            for r in 0..self.rows {
                data[r * self.cols + c] = column[r];
            }
        }
    }

    pub fn forward(&self, data: &mut [Complex<T>]) {
        self.transform(data, self.row_fwd.as_ref(), self.col_fwd.as_ref());
    }

    /// Normalized inverse transform.
    pub fn inverse(&self, data: &mut [Complex<T>]) {
        self.transform(data, self.row_inv.as_ref(), self.col_inv.as_ref());
        let scale = T::one() / T::from_count(self.rows * self.cols);
        for v in data.iter_mut() {
            *v = *v * scale;
        }
    }

    pub fn forward_real(&self, img: &Image<T>) -> Vec<Complex<T>> {
        debug_assert_eq!(img.shape(), (self.rows, self.cols));
        let mut data: Vec<Complex<T>> = img
            .as_slice()
            .iter()
            .map(|&v| Complex::new(v, T::zero()))
            .collect();
        self.forward(&mut data);
        data
    }

    /// Inverse transform keeping the real part.
    pub fn inverse_real(&self, mut data: Vec<Complex<T>>) -> Image<T> {
        self.inverse(&mut data);
        Image::new(
            self.rows,
            self.cols,
            data.into_iter().map(|c| c.re).collect(),
        )
        .expect("transform of a finite image is finite")
    }

    /// Transfer function of a small filter whose tap `(0, 0)` sits at the origin.
    pub fn transfer(&self, taps: &Image<T>) -> Vec<Complex<T>> {
        let mut canvas = Image::zeros(self.rows, self.cols);
        for r in 0..taps.rows() {
            for c in 0..taps.cols() {
                let (rr, cc) = (r % self.rows, c % self.cols);
                canvas.set(rr, cc, canvas.get(rr, cc) + taps.get(r, c));
            }
        }
        self.forward_real(&canvas)
    }
}

/// Periodic convolution `(x ⊛ k)(i) = Σ_u x((i-u) mod n) k(u)` with `k`'s
/// tap `(0, 0)` at the origin.
pub fn circular_convolve<T: Real>(x: &Image<T>, k: &Image<T>) -> Image<T> {
    let fft = Fft2::new(x.rows(), x.cols());
    let fx = fft.forward_real(x);
    let fk = fft.transfer(k);
    fft.inverse_real(fx.iter().zip(&fk).map(|(a, b)| a * b).collect())
}

/// Periodic cross-correlation `c(d) = Σ_p x(p) y((p + d) mod n)` for all lags,
/// with lag `d` stored at index `d mod n`.
pub fn circular_correlation<T: Real>(x: &Image<T>, y: &Image<T>) -> Image<T> {
    assert_eq!(
        x.shape(),
        y.shape(),
        "shape mismatch in circular correlation"
    );
    let fft = Fft2::new(x.rows(), x.cols());
    let fx = fft.forward_real(x);
    let fy = fft.forward_real(y);
    fft.inverse_real(fx.iter().zip(&fy).map(|(a, b)| a.conj() * b).collect())
}
