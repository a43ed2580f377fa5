//! Convolution eigenvalues and eigenvectors of an image.
//!
//! For a feature-filtered image `L(I)` and sampling sizes `s₁ × s₂`, the
//! convolution eigenvalues are the singular values of the Toeplitz matrix
//! `A_{s₁,s₂}(L(I))` and the eigenvectors are its right singular vectors,
//! reshaped to `s₁ × s₂` grids.
//!
//! Two routes compute them:
//! - [`SpectrumMethod::Svd`] runs a dense SVD of the Toeplitz matrix itself.
//! - [`SpectrumMethod::Gram`] eigendecomposes `AᵀA`, which is assembled in
//!   `O(s₁² s₂² + s₁s₂ n₁n₂)` from lagged products of `L(I)` without ever
//!   forming `A`. Eigenvalues below `ε·σ_max²` lose relative accuracy on this
//!   route, so [`SpectrumMethod::Auto`] prefers the SVD whenever the dense
//!   matrix fits in [`SVD_ENTRY_BUDGET`] entries.

use nalgebra::{DMatrix, SymmetricEigen, SVD};

use crate::error::{invalid, Error, Result};
use crate::features::FeatureFilter;
use crate::scalar::Real;
use crate::tensor::{ConvOperator, Image};

/// Largest dense Toeplitz matrix (in entries) that `Auto` hands to the SVD route.
pub const SVD_ENTRY_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpectrumMethod {
    #[default]
    Auto,
    Svd,
    Gram,
}

/// All `s₁s₂` convolution eigenpairs of an image, sorted by nonincreasing eigenvalue.
#[derive(Clone, Debug)]
pub struct ConvSpectrum<T> {
    sampling: (usize, usize),
    eigenvalues: Vec<T>,
    eigenvectors: Vec<Image<T>>,
}

impl<T: Real> ConvSpectrum<T> {
    /// Assembles a spectrum from precomputed pairs, sorting them. Used by the
    /// regularizer tests and by callers that already hold a decomposition.
    pub fn from_pairs(sampling: (usize, usize), mut pairs: Vec<(T, Image<T>)>) -> Result<Self> {
        let (s1, s2) = sampling;
        if s1 == 0 || s2 == 0 {
            return invalid("sampling sizes must be positive");
        }
        if pairs.iter().any(|(_, v)| v.shape() != sampling) {
            return Err(Error::SizeMismatch(
                "eigenvector shape differs from the sampling sizes".into(),
            ));
        }
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let (eigenvalues, eigenvectors) = pairs.into_iter().unzip();
        Ok(Self {
            sampling,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn sampling(&self) -> (usize, usize) {
        self.sampling
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// True when all `s₁s₂` pairs are present.
    pub fn is_complete(&self) -> bool {
        self.len() == self.sampling.0 * self.sampling.1
    }

    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &[Image<T>] {
        &self.eigenvectors
    }

    pub fn sigma_max(&self) -> T {
        self.eigenvalues[0]
    }

    pub fn sigma_min(&self) -> T {
        *self.eigenvalues.last().expect("empty spectrum")
    }

    /// `σ_max / σ_min`.
    pub fn condition(&self) -> Result<T> {
        let min = self.sigma_min();
        if min <= T::zero() {
            return Err(Error::DegenerateInput(
                "smallest convolution eigenvalue is numerically zero".into(),
            ));
        }
        Ok(self.sigma_max() / min)
    }
}

/// Spectrum of `img` under feature filter `filter`, choosing the route automatically.
pub fn conv_spectrum<T: Real>(
    img: &Image<T>,
    filter: &FeatureFilter<T>,
    s1: usize,
    s2: usize,
) -> Result<ConvSpectrum<T>> {
    conv_spectrum_with(img, filter, s1, s2, SpectrumMethod::Auto)
}

pub fn conv_spectrum_with<T: Real>(
    img: &Image<T>,
    filter: &FeatureFilter<T>,
    s1: usize,
    s2: usize,
    method: SpectrumMethod,
) -> Result<ConvSpectrum<T>> {
    if img.is_zero() {
        return Err(Error::DegenerateInput(
            "the zero image has no convolution spectrum".into(),
        ));
    }
    feature_spectrum(&filter.apply(img), s1, s2, method)
}

/// Spectrum of an already feature-filtered image.
pub fn feature_spectrum<T: Real>(
    feature: &Image<T>,
    s1: usize,
    s2: usize,
    method: SpectrumMethod,
) -> Result<ConvSpectrum<T>> {
    if s1 == 0 || s2 == 0 {
        return invalid("sampling sizes must be positive");
    }
    if feature.is_zero() {
        return Err(Error::DegenerateInput(
            "feature image is identically zero".into(),
        ));
    }
    let op = ConvOperator::new(feature, s1, s2)?;
    let (rows, cols) = op.dims();
    let method = match method {
        SpectrumMethod::Auto if rows * cols <= SVD_ENTRY_BUDGET => SpectrumMethod::Svd,
        SpectrumMethod::Auto => SpectrumMethod::Gram,
        m => m,
    };
    let (values, vectors) = match method {
        SpectrumMethod::Svd => svd_route(op),
        _ => gram_route(op),
    };
    let pairs = values
        .into_iter()
        .zip(vectors.column_iter())
        .map(|(sigma, col)| {
            let mut v: Vec<T> = col.iter().copied().collect();
            fix_sign(&mut v);
            let grid = Image::new(s1, s2, v)?;
            Ok((sigma, grid))
        })
        .collect::<Result<Vec<_>>>()?;
    ConvSpectrum::from_pairs((s1, s2), pairs)
}

fn svd_route<T: Real>(op: ConvOperator<'_, T>) -> (Vec<T>, DMatrix<T>) {
    let a = op.to_dense().into_matrix();
    let svd = SVD::new(a, false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    (
        svd.singular_values.iter().copied().collect(),
        v_t.transpose(),
    )
}

fn gram_route<T: Real>(op: ConvOperator<'_, T>) -> (Vec<T>, DMatrix<T>) {
    let eig = SymmetricEigen::new(op.gram());
    let values = eig
        .eigenvalues
        .iter()
        .map(|&l| if l > T::zero() { l.sqrt() } else { T::zero() })
        .collect();
    (values, eig.eigenvectors)
}

/// Makes the largest-magnitude entry positive so decompositions are reproducible.
fn fix_sign<T: Real>(v: &mut [T]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.magnitude() > v[best].magnitude() {
            best = i;
        }
    }
    if v[best] < T::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Smallest convolution eigenvalue σ_min; an image is τ-sharp when this is at least τ.
pub fn sharpness<T: Real>(
    img: &Image<T>,
    filter: &FeatureFilter<T>,
    s1: usize,
    s2: usize,
) -> Result<T> {
    Ok(conv_spectrum(img, filter, s1, s2)?.sigma_min())
}

/// Convolution condition number `σ_max / σ_min`.
pub fn conv_condition<T: Real>(
    img: &Image<T>,
    filter: &FeatureFilter<T>,
    s1: usize,
    s2: usize,
) -> Result<T> {
    conv_spectrum(img, filter, s1, s2)?.condition()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::make_log;
    use crate::tensor::{conv2d_full, toeplitz};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Image<f64> {
        Image::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0))
    }

    fn box_blur(img: &Image<f64>, size: usize) -> Image<f64> {
        let k = Image::filled(size, size, 1.0 / (size * size) as f64);
        conv2d_full(img, &k)
    }

    #[test]
    fn impulse_spectrum_is_flat() {
        let spec = conv_spectrum(&Image::<f64>::impulse(), &FeatureFilter::delta(), 3, 2).unwrap();
        assert_eq!(spec.len(), 6);
        for &s in spec.eigenvalues() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((spec.condition().unwrap() - 1.0).abs() < 1e-12);
        assert!(
            (sharpness(&Image::<f64>::impulse(), &FeatureFilter::delta(), 4, 4).unwrap() - 1.0)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn zero_image_is_degenerate() {
        let z = Image::<f64>::zeros(4, 4);
        assert!(matches!(
            conv_spectrum(&z, &FeatureFilter::delta(), 2, 2),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn spectrum_invariants_hold_on_both_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = random_image(&mut rng, 12, 10);
        let log = make_log(1.0).unwrap();
        let feature = log.apply(&img);
        let svd = feature_spectrum(&feature, 4, 3, SpectrumMethod::Svd).unwrap();
        let gram = feature_spectrum(&feature, 4, 3, SpectrumMethod::Gram).unwrap();
        for spec in [&svd, &gram] {
            assert!(spec.is_complete());
            let vals = spec.eigenvalues();
            assert!(vals.windows(2).all(|w| w[0] >= w[1]));
            assert!(spec.sigma_min() > 0.0);
            for (i, ki) in spec.eigenvectors().iter().enumerate() {
                for (j, kj) in spec.eigenvectors().iter().enumerate() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((ki.dot(kj) - expect).abs() < 1e-8);
                }
                let resp = conv2d_full(&feature, ki).frobenius_norm();
                assert!((resp - vals[i]).abs() <= 1e-8 * vals[i]);
            }
        }
        for (a, b) in svd.eigenvalues().iter().zip(gram.eigenvalues()) {
            assert!((a - b).abs() <= 1e-8 * svd.sigma_max());
        }
    }

    #[test]
    fn largest_eigenvalue_is_the_operator_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = random_image(&mut rng, 9, 9);
        let spec = conv_spectrum(&img, &FeatureFilter::delta(), 3, 3).unwrap();
        let a = toeplitz(&img, 3, 3).unwrap().into_matrix();
        let norm = SVD::new(a, false, false).singular_values.max();
        assert!((spec.sigma_max() - norm).abs() <= 1e-8 * norm);
    }

    #[test]
    fn random_probes_stay_within_extreme_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = random_image(&mut rng, 32, 32);
        let log = make_log(1.0).unwrap();
        let spec = conv_spectrum(&img, &log, 6, 6).unwrap();
        let feature = log.apply(&img);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for _ in 0..1000 {
            let x = Image::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let x = x.scaled(1.0 / x.frobenius_norm());
            let r = conv2d_full(&feature, &x).frobenius_norm();
            lo = lo.min(r);
            hi = hi.max(r);
        }
        assert!(hi <= spec.sigma_max() + 1e-8);
        assert!(lo >= spec.sigma_min() - 1e-8);
    }

    #[test]
    fn blur_lowers_sharpness_and_raises_condition() {
        // Edge-rich image: random piecewise-constant blocks.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let blocks = random_image(&mut rng, 6, 6);
        let img = Image::from_fn(24, 24, |r, c| blocks.get(r / 4, c / 4));
        let blurred = box_blur(&img, 3);
        for filter in [FeatureFilter::delta(), make_log(1.0).unwrap()] {
            let sharp = sharpness(&img, &filter, 5, 5).unwrap();
            let blurry = sharpness(&blurred, &filter, 5, 5).unwrap();
            assert!(blurry < sharp, "{blurry} !< {sharp}");
            let c_sharp = conv_condition(&img, &filter, 5, 5).unwrap();
            let c_blur = conv_condition(&blurred, &filter, 5, 5).unwrap();
            assert!(c_blur > c_sharp);
            assert!(c_sharp.is_finite() && c_sharp >= 1.0);
        }
    }

    #[test]
    fn eigenvalues_shrink_under_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..5 {
            let img = random_image(&mut rng, 14, 14);
            let k = Image::from_fn(3, 3, |_, _| rng.random_range(0.0..1.0));
            let k = k.scaled(1.0 / k.sum());
            let blurred = conv2d_full(&img, &k);
            for filter in [FeatureFilter::delta(), make_log(1.0).unwrap()] {
                let a = conv_spectrum(&img, &filter, 4, 4).unwrap();
                let b = conv_spectrum(&blurred, &filter, 4, 4).unwrap();
                for (sb, si) in b.eigenvalues().iter().zip(a.eigenvalues()) {
                    assert!(*sb <= si + 1e-9);
                }
            }
        }
    }
}
