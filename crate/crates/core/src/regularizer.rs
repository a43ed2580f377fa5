//! The image-dependent kernel regularizer
//! `h(K) = Σᵢ ‖K ⊗ κᵢ‖²_F / σᵢ²`, built from the convolution spectrum of the
//! blurry image.
//!
//! `h` is the quadratic form `ν(K)ᵀ H ν(K)` with
//! `H = Σᵢ A(κᵢ)ᵀ A(κᵢ) / σᵢ²`. Each `A(κᵢ)ᵀ A(κᵢ)` is block-Toeplitz and only
//! depends on the lagged products of `κᵢ`, so `H` is assembled from a single
//! weighted lag table of size `(2m₁-1) × (2m₂-1)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::kernel::Kernel;
use crate::qp::{solve_qp_with, QpOptions, QpProblem, QpSolution};
use crate::scalar::{CompensatedSum, Real};
use crate::spectral::ConvSpectrum;
use crate::tensor::{autocorrelation, conv2d_full, gram_from_lags, vectorize, Image};

/// Relative floor applied to eigenvalues before they are inverted.
pub const SIGMA_CLAMP_RATIO: f64 = 1e-12;

/// Hessian of the kernel regularizer.
#[derive(Clone, Debug)]
pub struct RegularizerHessian<T: Real> {
    kernel_shape: (usize, usize),
    sampling: (usize, usize),
    sigma_max: T,
    clamped: usize,
    matrix: DMatrix<T>,
}

impl<T: Real> RegularizerHessian<T> {
    pub fn kernel_shape(&self) -> (usize, usize) {
        self.kernel_shape
    }

    pub fn sampling(&self) -> (usize, usize) {
        self.sampling
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    /// Number of eigenvalues raised to the clamp floor during assembly.
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    pub fn sigma_max(&self) -> T {
        self.sigma_max
    }

    /// Lower bound `s₁s₂ / σ_max²` on the smallest eigenvalue of `H`.
    pub fn eigenvalue_lower_bound(&self) -> T {
        T::from_count(self.sampling.0 * self.sampling.1) / (self.sigma_max * self.sigma_max)
    }

    /// Smallest and largest eigenvalue of `H`.
    pub fn eigenvalue_range(&self) -> (T, T) {
        let eig = SymmetricEigen::new(self.matrix.clone());
        (eig.eigenvalues.min(), eig.eigenvalues.max())
    }

    /// `ν(X)ᵀ H ν(X)` for an arbitrary kernel-sized grid.
    pub fn quad_form(&self, x: &Image<T>) -> Result<T> {
        if x.shape() != self.kernel_shape {
            return Err(Error::SizeMismatch(format!(
                "{}x{} grid for a regularizer over {}x{} kernels",
                x.rows(),
                x.cols(),
                self.kernel_shape.0,
                self.kernel_shape.1
            )));
        }
        let v = DVector::from_vec(vectorize(x));
        Ok(v.dot(&(&self.matrix * &v)))
    }
}

/// Assembles `H = Σᵢ A_{m₁,m₂}(κᵢ)ᵀ A_{m₁,m₂}(κᵢ) / σᵢ²`.
///
/// Eigenvalues below `1e-12·σ_max` are clamped to that floor; the count is
/// kept in [`RegularizerHessian::clamped_count`]. Contributions are summed in
/// index order with compensated summation, so the result does not depend on
/// thread scheduling.
pub fn build_hessian<T: Real>(
    spec: &ConvSpectrum<T>,
    m1: usize,
    m2: usize,
) -> Result<RegularizerHessian<T>> {
    if m1 == 0 || m2 == 0 {
        return invalid("kernel sizes must be positive");
    }
    if !spec.is_complete() {
        return invalid(format!(
            "regularizer needs all {} convolution eigenpairs, got {}",
            spec.sampling().0 * spec.sampling().1,
            spec.len()
        ));
    }
    let sigma_max = spec.sigma_max();
    if sigma_max <= T::zero() {
        return Err(Error::DegenerateInput(
            "spectrum is identically zero".into(),
        ));
    }
    let floor = sigma_max * T::lit(SIGMA_CLAMP_RATIO);
    let mut clamped = 0;
    let weights: Vec<T> = spec
        .eigenvalues()
        .iter()
        .map(|&s| {
            let s = if s < floor {
                clamped += 1;
                floor
            } else {
                s
            };
            T::one() / (s * s)
        })
        .collect();
    let lags = weighted_lags(spec.eigenvectors(), &weights, m1, m2);
    if clamped > 0 {
        log::warn!("{clamped} convolution eigenvalues clamped while building the regularizer");
    }
    Ok(RegularizerHessian {
        kernel_shape: (m1, m2),
        sampling: spec.sampling(),
        sigma_max,
        clamped,
        matrix: gram_from_lags(&lags, m1, m2),
    })
}

/// `Σᵢ A(κᵢ)ᵀ A(κᵢ)` without weights. For a complete orthonormal set of
/// eigenvectors this equals `s₁s₂ · Identity`.
pub fn unweighted_hessian<T: Real>(
    spec: &ConvSpectrum<T>,
    m1: usize,
    m2: usize,
) -> Result<DMatrix<T>> {
    if m1 == 0 || m2 == 0 {
        return invalid("kernel sizes must be positive");
    }
    let ones = vec![T::one(); spec.len()];
    let lags = weighted_lags(spec.eigenvectors(), &ones, m1, m2);
    Ok(gram_from_lags(&lags, m1, m2))
}

fn weighted_lags<T: Real>(vectors: &[Image<T>], weights: &[T], m1: usize, m2: usize) -> Image<T> {
    let tables: Vec<Image<T>> = vectors
        .par_iter()
        .map(|k| autocorrelation(k, m1 - 1, m2 - 1))
        .collect();
    let (rows, cols) = (2 * m1 - 1, 2 * m2 - 1);
    let mut acc = vec![CompensatedSum::new(); rows * cols];
    for (table, &w) in tables.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(table.as_slice()) {
            a.add(w * v);
        }
    }
    Image::new(rows, cols, acc.iter().map(|a| a.value()).collect())
        .expect("lag table dimensions are positive")
}

/// `h(K) = ν(K)ᵀ H ν(K)`.
pub fn h_value<T: Real>(hessian: &RegularizerHessian<T>, k: &Kernel<T>) -> Result<T> {
    hessian.quad_form(k.as_image())
}

/// Kernel minimizing `h` alone over the simplex, with the solver report.
pub fn estimate_kernel<T: Real>(
    hessian: &RegularizerHessian<T>,
    opts: &QpOptions<T>,
) -> Result<(Kernel<T>, QpSolution<T>)> {
    let (m1, m2) = hessian.kernel_shape();
    let solution = solve_qp_with(&QpProblem::quadratic(hessian.matrix().clone())?, opts)?;
    Ok((solution.to_kernel(m1, m2)?, solution))
}

/// Per-eigenvector slack `σᵢ(B)/σ_min(I₀) − ‖K ⊗ κᵢ(B)‖_F`.
///
/// For the true kernel of a noiseless blur every slack is nonnegative,
/// provided `sigma_min_sharp` is the smallest convolution eigenvalue of the
/// sharp image at sampling sizes `(m₁+s₁-1) × (m₂+s₂-1)`, the size of
/// `K ⊗ κᵢ`.
pub fn necessary_condition_check<T: Real>(
    spec_blurry: &ConvSpectrum<T>,
    sigma_min_sharp: T,
    k: &Kernel<T>,
) -> Vec<T> {
    spec_blurry
        .eigenvalues()
        .iter()
        .zip(spec_blurry.eigenvectors())
        .map(|(&sigma, kappa)| {
            sigma / sigma_min_sharp - conv2d_full(k.as_image(), kappa).frobenius_norm()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{make_log, FeatureFilter};
    use crate::spectral::conv_spectrum;
    use crate::tensor::toeplitz;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Image<f64> {
        Image::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Kernel<f64> {
        Kernel::normalized(random_image(rng, rows, cols)).unwrap()
    }

    /// Σᵢ ‖X ⊗ κᵢ‖² / σᵢ², straight from the definition.
    fn direct_h(spec: &ConvSpectrum<f64>, x: &Image<f64>) -> f64 {
        spec.eigenvalues()
            .iter()
            .zip(spec.eigenvectors())
            .map(|(s, k)| conv2d_full(x, k).frobenius_norm().powi(2) / (s * s))
            .sum()
    }

    #[test]
    fn hessian_matches_dense_toeplitz_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = random_image(&mut rng, 10, 9);
        let spec = conv_spectrum(&img, &make_log(1.0).unwrap(), 3, 4).unwrap();
        let h = build_hessian(&spec, 2, 3).unwrap();
        let mut dense = DMatrix::<f64>::zeros(6, 6);
        for (s, k) in spec.eigenvalues().iter().zip(spec.eigenvectors()) {
            let a = toeplitz(k, 2, 3).unwrap().into_matrix();
            dense += a.transpose() * a / (s * s);
        }
        assert!((h.matrix() - &dense).amax() <= 1e-10 * dense.amax());
        assert!((h.matrix() - h.matrix().transpose()).amax() < 1e-10);
    }

    #[test]
    fn unweighted_sum_is_scaled_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let img = random_image(&mut rng, 12, 12);
        let spec = conv_spectrum(&img, &FeatureFilter::delta(), 4, 5).unwrap();
        let h1 = unweighted_hessian(&spec, 3, 3).unwrap();
        let expected = DMatrix::<f64>::identity(9, 9) * 20.0;
        assert!((h1 - expected).amax() < 1e-8);
    }

    #[test]
    fn impulse_image_gives_scaled_identity() {
        let spec = conv_spectrum(&Image::<f64>::impulse(), &FeatureFilter::delta(), 3, 3).unwrap();
        let h = build_hessian(&spec, 2, 2).unwrap();
        assert!((h.matrix() - DMatrix::<f64>::identity(4, 4) * 9.0).amax() < 1e-10);
    }

    #[test]
    fn quadratic_form_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let img = random_image(&mut rng, 16, 16);
        let spec = conv_spectrum(&img, &make_log(1.0).unwrap(), 5, 5).unwrap();
        let h = build_hessian(&spec, 3, 3).unwrap();
        for _ in 0..20 {
            let k = random_kernel(&mut rng, 3, 3);
            let fast = h_value(&h, &k).unwrap();
            let slow = direct_h(&spec, k.as_image());
            assert!((fast - slow).abs() <= 1e-8 * slow);
        }
        let delta = Kernel::delta(3, 3);
        let inv_sq: f64 = spec.eigenvalues().iter().map(|s| 1.0 / (s * s)).sum();
        assert!((h_value(&h, &delta).unwrap() - inv_sq).abs() <= 1e-8 * inv_sq);
        assert_eq!(h.quad_form(&Image::zeros(3, 3)).unwrap(), 0.0);
        assert!(h.quad_form(&Image::zeros(2, 3)).is_err());
    }

    #[test]
    fn lower_bound_on_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let img = random_image(&mut rng, 14, 14);
        let spec = conv_spectrum(&img, &make_log(1.0).unwrap(), 4, 4).unwrap();
        let h = build_hessian(&spec, 3, 3).unwrap();
        let bound = h.eigenvalue_lower_bound();
        let (lo, _) = h.eigenvalue_range();
        assert!(lo >= bound - 1e-6);
        for _ in 0..50 {
            let x = Image::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let hx = h.quad_form(&x).unwrap();
            assert!(hx >= bound * x.frobenius_norm().powi(2) * (1.0 - 1e-8));
        }
    }

    #[test]
    fn incomplete_spectrum_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let img = random_image(&mut rng, 8, 8);
        let spec = conv_spectrum(&img, &FeatureFilter::delta(), 3, 3).unwrap();
        let partial: Vec<_> = spec
            .eigenvalues()
            .iter()
            .copied()
            .zip(spec.eigenvectors().iter().cloned())
            .take(5)
            .collect();
        let partial = ConvSpectrum::from_pairs((3, 3), partial).unwrap();
        assert!(matches!(
            build_hessian(&partial, 2, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn slacks_blow_up_as_sharp_bound_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let img = random_image(&mut rng, 8, 8);
        let spec = conv_spectrum(&img, &FeatureFilter::delta(), 3, 3).unwrap();
        let k = Kernel::uniform(2, 2);
        let slacks = necessary_condition_check(&spec, 1e-12, &k);
        assert!(slacks.iter().all(|&s| s > 1e6));
    }
}
