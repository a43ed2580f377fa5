//! Blind image deblurring driven by the spectra of convolution operators.
//!
//! An observed image `B` is modelled as a sharp image `I` convolved with a
//! nonnegative kernel `K` that sums to one. The convolution eigenvalues of a
//! feature-filtered `B` (singular values of its Toeplitz operator) shrink
//! under blur, and the kernel regularizer `h(K)` built from them penalizes
//! kernels that would explain `B` as sharp. Kernels are recovered by
//! quadratic programming over the simplex, images by TV deconvolution, and
//! both jointly by alternating minimization.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the common `f64` instantiation.

pub mod blind;
pub mod deconv;
pub mod error;
pub mod features;
pub(crate) mod fourier;
pub mod harness;
pub mod kernel;
pub mod qp;
pub mod regularizer;
pub mod scalar;
pub mod spectral;
pub mod tensor;

pub use blind::{alpha_sweep, blind_deblur, kstep, BlindProblem, DeblurConfig};
pub use deconv::{total_variation, tv_deconv, Boundary, TvSolverConfig};
pub use error::{Error, ErrorCategory, Result};
pub use features::{FeatureKind, FeatureSpec};
pub use qp::{project_simplex, solve_qp, QpOptions, QpProblem};
pub use regularizer::{build_hessian, h_value};
pub use scalar::Real;
pub use spectral::{conv_spectrum, sharpness, SpectrumMethod};
pub use tensor::{conv2d_full, toeplitz};

pub type Image = tensor::Image<f64>;
pub type Kernel = kernel::Kernel<f64>;
pub type ConvSpectrum = spectral::ConvSpectrum<f64>;
pub type FeatureFilter = features::FeatureFilter<f64>;
pub type RegularizerHessian = regularizer::RegularizerHessian<f64>;
pub type DeblurResult = blind::DeblurResult<f64>;

pub type Image32 = tensor::Image<f32>;
pub type Kernel32 = kernel::Kernel<f32>;
pub type ConvSpectrum32 = spectral::ConvSpectrum<f32>;
