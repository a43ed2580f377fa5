//! Feature filters applied by convolution before spectral analysis.
//!
//! The Laplacian-of-Gaussian taps are sampled from
//! `-(1/(π σ⁴)) (1 - r²/(2σ²)) exp(-r²/(2σ²))` on a `(2⌈3σ⌉+1)²` grid and then
//! shifted to zero mean. The amplitude is left unnormalized: rescaling the
//! filter rescales every convolution eigenvalue by the same factor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::tensor::{conv2d_full, Image};

pub const DEFAULT_LOG_SIGMA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Raw pixel values.
    Delta,
    /// Laplacian-of-Gaussian edge response.
    Log,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Delta => "delta",
            FeatureKind::Log => "log",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "delta" | "raw" => Ok(FeatureKind::Delta),
            "log" => Ok(FeatureKind::Log),
            other => invalid(format!(
                "unknown feature filter '{other}' (expected delta or log)"
            )),
        }
    }
}

/// Serializable description of a feature filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub log_sigma: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            kind: FeatureKind::Log,
            log_sigma: DEFAULT_LOG_SIGMA,
        }
    }
}

impl FeatureSpec {
    pub fn delta() -> Self {
        Self {
            kind: FeatureKind::Delta,
            log_sigma: DEFAULT_LOG_SIGMA,
        }
    }

    pub fn build<T: Real>(&self) -> Result<FeatureFilter<T>> {
        match self.kind {
            FeatureKind::Delta => Ok(FeatureFilter::delta()),
            FeatureKind::Log => make_log(T::lit(self.log_sigma)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFilter<T> {
    kind: FeatureKind,
    taps: Image<T>,
    sigma: Option<T>,
}

impl<T: Real> FeatureFilter<T> {
    pub fn delta() -> Self {
        Self {
            kind: FeatureKind::Delta,
            taps: Image::impulse(),
            sigma: None,
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn taps(&self) -> &Image<T> {
        &self.taps
    }

    pub fn sigma(&self) -> Option<T> {
        self.sigma
    }

    /// `L(I) = L ⊗ I` in full mode.
    pub fn apply(&self, img: &Image<T>) -> Image<T> {
        match self.kind {
            FeatureKind::Delta => img.clone(),
            FeatureKind::Log => conv2d_full(&self.taps, img),
        }
    }
}

/// Zero-mean Laplacian-of-Gaussian filter with scale `sigma`.
pub fn make_log<T: Real>(sigma: T) -> Result<FeatureFilter<T>> {
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return invalid(format!(
            "LoG scale must be positive, got {}",
            sigma.to_f64_lossy()
        ));
    }
    let half = (T::lit(3.0) * sigma).ceil().to_usize().unwrap_or(0);
    let size = 2 * half + 1;
    let s2 = sigma * sigma;
    let norm = -T::one() / (T::pi() * s2 * s2);
    let two = T::lit(2.0);
    let mut taps = Image::from_fn(size, size, |r, c| {
        let x = T::from_count(c) - T::from_count(half);
        let y = T::from_count(r) - T::from_count(half);
        let q = (x * x + y * y) / (two * s2);
        norm * (T::one() - q) * (-q).exp()
    });
    let mean = taps.sum() / T::from_count(size * size);
    taps = taps.map(|v| v - mean);
    Ok(FeatureFilter {
        kind: FeatureKind::Log,
        taps,
        sigma: Some(sigma),
    })
}

/// Applies the feature filter to an image (full-mode convolution).
pub fn apply_filter<T: Real>(filter: &FeatureFilter<T>, img: &Image<T>) -> Image<T> {
    filter.apply(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_valid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_support_and_zero_sum() {
        let f = make_log(1.0f64).unwrap();
        assert_eq!(f.taps().shape(), (7, 7));
        assert!(f.taps().sum().abs() < 1e-12);
        assert_eq!(f.kind(), FeatureKind::Log);
        // Center tap is the most negative one.
        assert_eq!(f.taps().get(3, 3), f.taps().min_value());
        let wide = make_log(2.0f64).unwrap();
        assert_eq!(wide.taps().shape(), (13, 13));
    }

    #[test]
    fn log_rejects_nonpositive_scale() {
        assert!(make_log(0.0f64).is_err());
        assert!(make_log(-1.0f64).is_err());
        assert!(make_log(f64::NAN).is_err());
    }

    #[test]
    fn log_of_constant_image_vanishes_in_valid_region() {
        let f = make_log(1.0f64).unwrap();
        let img = Image::filled(12, 10, 0.7);
        let resp = conv2d_valid(&img, f.taps()).unwrap();
        assert!(resp.max_abs() < 1e-12);
    }

    #[test]
    fn log_responds_most_strongly_at_a_step_edge() {
        let f = make_log(1.0f64).unwrap();
        let step = Image::from_fn(16, 16, |_, c| if c >= 8 { 1.0 } else { 0.0 });
        let resp = conv2d_valid(&step, f.taps()).unwrap();
        // Valid column j is centered on image column j + 3, so the edge between
        // image columns 7 and 8 sits between valid columns 4 and 5.
        let mut best = (0, 0.0);
        for c in 0..resp.cols() {
            let col_max = (0..resp.rows())
                .map(|r| resp.get(r, c).abs())
                .fold(0.0, f64::max);
            if col_max > best.1 {
                best = (c, col_max);
            }
        }
        assert!(
            best.0 == 4 || best.0 == 5,
            "peak at valid column {}",
            best.0
        );
        // Far from the edge the response is flat zero.
        assert!(resp.get(5, 0).abs() < 1e-12 && resp.get(5, 9).abs() < 1e-12);
    }

    #[test]
    fn delta_filter_is_identity() {
        let img = Image::<f64>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(apply_filter(&FeatureFilter::delta(), &img), img);
    }

    #[test]
    fn filtering_commutes_with_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = make_log(1.0f64).unwrap();
        for _ in 0..5 {
            let img = Image::from_fn(14, 11, |_, _| rng.random_range(0.0..1.0));
            let k = Image::from_fn(3, 4, |_, _| rng.random_range(0.0..1.0));
            let a = f.apply(&conv2d_full(&img, &k));
            let b = conv2d_full(&f.apply(&img), &k);
            assert!(a.sub(&b).max_abs() < 1e-10);
        }
    }

    #[test]
    fn parses_kind() {
        assert_eq!("LoG".parse::<FeatureKind>().unwrap(), FeatureKind::Log);
        assert_eq!("delta".parse::<FeatureKind>().unwrap(), FeatureKind::Delta);
        assert!("sobel".parse::<FeatureKind>().is_err());
    }
}
