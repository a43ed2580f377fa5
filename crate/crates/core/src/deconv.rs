//! Non-blind deconvolution with an anisotropic total-variation prior,
//! `min_I ‖B − I ⊗ K‖²_F + λ ‖∇I‖₁`, by half-quadratic splitting.
//!
//! The latent image lives on a periodic canvas the size of `B`. An image `I`
//! of size `(n₁-m₁+1) × (n₂-m₂+1)` embedded in the top-left corner of that
//! canvas (zeros elsewhere) satisfies `canvas ⊛ K = I ⊗ K` exactly, so the
//! periodic model contains the full-convolution model. Each outer step fixes
//! the splitting weight β and alternates
//! 1. soft-thresholding of the auxiliary gradients `w = shrink(∇I, 1/β)`,
//! 2. the quadratic solve
//!    `(KᵀK + (λβ/2) ∇ᵀ∇) I = KᵀB + (λβ/2) ∇ᵀw`, diagonal in Fourier space.

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fourier::{circular_convolve, Fft2};
use crate::kernel::Kernel;
use crate::scalar::Real;
use crate::tensor::{conv2d_full, Image};

pub const DEFAULT_LAMBDA: f64 = 0.0015;

/// How the observed image relates to the latent one at its borders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// The observation is the full convolution `I ⊗ K` (synthetic blur).
    #[default]
    Full,
    /// The observation is a crop of a larger scene; it is padded by the kernel
    /// radius with a tapered band before restoration.
    Crop,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Boundary::Full),
            "crop" => Ok(Boundary::Crop),
            other => invalid(format!(
                "unknown boundary mode '{other}' (expected full or crop)"
            )),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TvSolverConfig {
    /// TV weight λ.
    pub lambda: f64,
    /// Strictly increasing splitting weights.
    pub betas: Vec<f64>,
    /// Alternations per β.
    pub inner_iterations: usize,
    /// Relative image change below which the alternation at a given β stops early.
    pub tolerance: f64,
}

impl Default for TvSolverConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            betas: default_beta_schedule(),
            inner_iterations: 1,
            tolerance: 1e-4,
        }
    }
}

/// `1, 2√2, 8, …` while `β ≤ 256`.
pub fn default_beta_schedule() -> Vec<f64> {
    let mut betas = vec![1.0];
    let ratio = 2.0 * 2f64.sqrt();
    loop {
        let next = betas.last().unwrap() * ratio;
        if next > 256.0 * (1.0 + 1e-12) {
            break;
        }
        betas.push(next);
    }
    betas
}

impl TvSolverConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid(format!(
                "TV weight must be nonnegative, got {}",
                self.lambda
            ));
        }
        if self.betas.is_empty() || self.betas.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
            return invalid("β schedule must be a nonempty list of positive values");
        }
        if self.betas.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("β schedule must be strictly increasing");
        }
        if self.inner_iterations == 0 {
            return invalid("at least one inner iteration per β is required");
        }
        if !(self.tolerance > 0.0) {
            return invalid("tolerance must be positive");
        }
        Ok(())
    }
}

/// Outcome of a TV deconvolution on the periodic canvas.
#[derive(Clone, Debug)]
pub struct TvOutput<T> {
    /// Latent image at the sharp size `(n₁-m₁+1) × (n₂-m₂+1)`.
    pub image: Image<T>,
    /// Full periodic canvas, the same size as the observation.
    pub canvas: Image<T>,
    pub alternations: usize,
    /// Relative change of the last alternation.
    pub last_change: f64,
    /// True when the last alternation changed the image by less than the tolerance.
    pub converged: bool,
}

/// Anisotropic total variation with periodic forward differences.
pub fn total_variation<T: Real>(img: &Image<T>) -> T {
    let (rows, cols) = img.shape();
    let mut tv = T::zero();
    for r in 0..rows {
        for c in 0..cols {
            let v = img.get(r, c);
            tv += (img.get(r, (c + 1) % cols) - v).magnitude();
            tv += (img.get((r + 1) % rows, c) - v).magnitude();
        }
    }
    tv
}

/// Periodic forward differences `(∂ₓ, ∂ᵧ)`.
pub(crate) fn gradient<T: Real>(img: &Image<T>) -> (Image<T>, Image<T>) {
    let (rows, cols) = img.shape();
    let dx = Image::from_fn(rows, cols, |r, c| {
        img.get(r, (c + 1) % cols) - img.get(r, c)
    });
    let dy = Image::from_fn(rows, cols, |r, c| {
        img.get((r + 1) % rows, c) - img.get(r, c)
    });
    (dx, dy)
}

/// Adjoint of [`gradient`].
#[cfg(test)]
pub(crate) fn gradient_adjoint<T: Real>(dx: &Image<T>, dy: &Image<T>) -> Image<T> {
    let (rows, cols) = dx.shape();
    Image::from_fn(rows, cols, |r, c| {
        dx.get(r, (c + cols - 1) % cols) - dx.get(r, c) + dy.get((r + rows - 1) % rows, c)
            - dy.get(r, c)
    })
}

/// Scalar soft threshold, the minimizer of `|w| + (β/2)(w − v)²`.
#[inline]
pub fn shrink<T: Real>(v: T, threshold: T) -> T {
    if v > threshold {
        v - threshold
    } else if v < -threshold {
        v + threshold
    } else {
        T::zero()
    }
}

/// `‖B − canvas ⊛ K‖² + λ TV(canvas)` on the periodic canvas.
pub fn canvas_objective<T: Real>(b: &Image<T>, canvas: &Image<T>, k: &Kernel<T>, lambda: T) -> T {
    let r = b.sub(&circular_convolve(canvas, k.as_image()));
    r.dot(&r) + lambda * total_variation(canvas)
}

/// `‖B − I ⊗ K‖² + λ TV(I)` in the full-convolution model, with `I`
/// zero-embedded in the observation-sized canvas for the TV term.
pub fn full_objective<T: Real>(
    b: &Image<T>,
    img: &Image<T>,
    k: &Kernel<T>,
    lambda: T,
) -> Result<T> {
    let conv = conv2d_full(img, k.as_image());
    if conv.shape() != b.shape() {
        return Err(Error::SizeMismatch(format!(
            "{}x{} image blurred by a {}x{} kernel does not match the {}x{} observation",
            img.rows(),
            img.cols(),
            k.rows(),
            k.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let r = b.sub(&conv);
    let embedded = img.embed(b.rows(), b.cols(), 0, 0)?;
    Ok(r.dot(&r) + lambda * total_variation(&embedded))
}

/// Pads a cropped observation by the kernel radius on every side. The band is
/// the replicated edge value faded to zero with a raised-cosine ramp.
pub fn pad_observation<T: Real>(b: &Image<T>, m1: usize, m2: usize) -> Image<T> {
    let (pr, pc) = (m1 - 1, m2 - 1);
    let (top, left) = (pr / 2, pc / 2);
    let (rows, cols) = (b.rows() + pr, b.cols() + pc);
    let ramp = |dist: usize, width: usize| -> T {
        if dist == 0 {
            return T::one();
        }
        let t = T::from_count(dist) / T::from_count(width + 1);
        (T::one() + (T::pi() * t).cos()) / T::lit(2.0)
    };
    Image::from_fn(rows, cols, |r, c| {
        let (rr, dr, wr) = clamp_index(r, top, b.rows(), pr - top);
        let (cc, dc, wc) = clamp_index(c, left, b.cols(), pc - left);
        b.get(rr, cc) * ramp(dr, wr) * ramp(dc, wc)
    })
}

/// Maps a padded coordinate to the source, returning the distance into the
/// band and the band width on that side.
fn clamp_index(i: usize, before: usize, len: usize, after: usize) -> (usize, usize, usize) {
    if i < before {
        (0, before - i, before)
    } else if i >= before + len {
        (len - 1, i + 1 - before - len, after)
    } else {
        (i - before, 0, 0)
    }
}

/// Restores the latent image at sharp size from an observation.
pub fn tv_deconv<T: Real>(
    b: &Image<T>,
    k: &Kernel<T>,
    cfg: &TvSolverConfig,
) -> Result<TvOutput<T>> {
    tv_deconv_with(b, k, cfg, Boundary::Full)
}

pub fn tv_deconv_with<T: Real>(
    b: &Image<T>,
    k: &Kernel<T>,
    cfg: &TvSolverConfig,
    boundary: Boundary,
) -> Result<TvOutput<T>> {
    let (m1, m2) = k.shape();
    let observed = match boundary {
        Boundary::Full => b.clone(),
        Boundary::Crop => pad_observation(b, m1, m2),
    };
    let mut out = tv_deconv_canvas(&observed, k, cfg, None)?;
    if boundary == Boundary::Crop {
        // The padded observation has sharp size equal to the original crop.
        out.image = out.canvas.crop(0, 0, b.rows(), b.cols())?;
    }
    Ok(out)
}

/// Runs the splitting on the periodic canvas. Without an initial canvas the
/// observation is used, shifted so that the centered impulse reproduces it.
pub fn tv_deconv_canvas<T: Real>(
    b: &Image<T>,
    k: &Kernel<T>,
    cfg: &TvSolverConfig,
    init: Option<&Image<T>>,
) -> Result<TvOutput<T>> {
    cfg.validate()?;
    let (m1, m2) = k.shape();
    let (n1, n2) = b.shape();
    if m1 > n1 || m2 > n2 {
        return invalid(format!(
            "{m1}x{m2} kernel is larger than the {n1}x{n2} observation"
        ));
    }
    let mut canvas = match init {
        Some(img) if img.shape() == b.shape() => img.clone(),
        Some(_) => {
            return Err(Error::SizeMismatch(
                "initial canvas must match the observation".into(),
            ))
        }
        None => b.roll(-(((m1 - 1) / 2) as isize), -(((m2 - 1) / 2) as isize)),
    };
    let solver = QuadraticStep::new(b, k);
    let lambda = T::lit(cfg.lambda);
    let mut alternations = 0;
    let mut last_change = f64::INFINITY;
    for &beta in &cfg.betas {
        let beta = T::lit(beta);
        for _ in 0..cfg.inner_iterations {
            let (wx, wy) = if lambda > T::zero() {
                let (dx, dy) = gradient(&canvas);
                let t = T::one() / beta;
                (dx.map(|v| shrink(v, t)), dy.map(|v| shrink(v, t)))
            } else {
                (Image::zeros(n1, n2), Image::zeros(n1, n2))
            };
            let next = solver.solve(lambda * beta / T::lit(2.0), &wx, &wy);
            let norm = canvas
                .frobenius_norm()
                .to_f64_lossy()
                .max(f64::MIN_POSITIVE);
            last_change = next.sub(&canvas).frobenius_norm().to_f64_lossy() / norm;
            canvas = next;
            alternations += 1;
            if last_change < cfg.tolerance {
                break;
            }
        }
    }
    if canvas.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput(
            "deconvolution produced non-finite values".into(),
        ));
    }
    let image = canvas.crop(0, 0, n1 - m1 + 1, n2 - m2 + 1)?;
    Ok(TvOutput {
        image,
        canvas,
        alternations,
        last_change,
        converged: last_change < cfg.tolerance,
    })
}

/// Fourier-diagonal solver for `(KᵀK + μ ∇ᵀ∇) I = KᵀB + μ ∇ᵀw`.
pub(crate) struct QuadraticStep<T: Real> {
    fft: Fft2<T>,
    #[cfg(test)]
    k_hat: Vec<Complex<T>>,
    kb_hat: Vec<Complex<T>>,
    dx_hat: Vec<Complex<T>>,
    dy_hat: Vec<Complex<T>>,
    lap: Vec<T>,
    k_pow: Vec<T>,
}

impl<T: Real> QuadraticStep<T> {
    pub fn new(b: &Image<T>, k: &Kernel<T>) -> Self {
        let fft = Fft2::new(b.rows(), b.cols());
        let k_hat = fft.transfer(k.as_image());
        let b_hat = fft.forward_real(b);
        let kb_hat = k_hat
            .iter()
            .zip(&b_hat)
            .map(|(k, b)| k.conj() * b)
            .collect();
        // A forward difference is a correlation with taps (-1, +1); the
        // transfer function of the equivalent convolution is the conjugate.
        let dx_taps = Image::from_rows(&[[-1.0, 1.0]]).expect("static taps");
        let dy_taps = Image::from_rows(&[[-1.0], [1.0]]).expect("static taps");
        let dx_hat: Vec<Complex<T>> = fft
            .transfer(&dx_taps)
            .into_iter()
            .map(|c| c.conj())
            .collect();
        let dy_hat: Vec<Complex<T>> = fft
            .transfer(&dy_taps)
            .into_iter()
            .map(|c| c.conj())
            .collect();
        let lap = dx_hat
            .iter()
            .zip(&dy_hat)
            .map(|(a, b)| a.norm_sqr() + b.norm_sqr())
            .collect();
        let k_pow = k_hat.iter().map(|k| k.norm_sqr()).collect();
        Self {
            fft,
            #[cfg(test)]
            k_hat,
            kb_hat,
            dx_hat,
            dy_hat,
            lap,
            k_pow,
        }
    }

    pub fn solve(&self, mu: T, wx: &Image<T>, wy: &Image<T>) -> Image<T> {
        let peak = self
            .k_pow
            .iter()
            .zip(&self.lap)
            .fold(T::zero(), |m, (&k, &l)| m.max(k + mu * l));
        let floor = peak * T::default_epsilon() * T::lit(16.0);
        let rhs: Vec<Complex<T>> = if mu > T::zero() {
            let wx_hat = self.fft.forward_real(wx);
            let wy_hat = self.fft.forward_real(wy);
            (0..self.kb_hat.len())
                .map(|i| {
                    self.kb_hat[i]
                        + (self.dx_hat[i].conj() * wx_hat[i] + self.dy_hat[i].conj() * wy_hat[i])
                            * mu
                })
                .collect()
        } else {
            self.kb_hat.clone()
        };
        let solution: Vec<Complex<T>> = rhs
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let denom = self.k_pow[i] + mu * self.lap[i];
                if denom > floor {
                    r / denom
                } else {
                    Complex::new(T::zero(), T::zero())
                }
            })
            .collect();
        self.fft.inverse_real(solution)
    }

    #[cfg(test)]
    pub fn kernel_transfer(&self) -> &[Complex<T>] {
        &self.k_hat
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_full;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_kernel(size: usize, sigma: f64) -> Kernel<f64> {
        let c = (size / 2) as f64;
        let img = Image::from_fn(size, size, |r, col| {
            let (y, x) = (r as f64 - c, col as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        });
        Kernel::normalized(img).unwrap()
    }

    fn blocks(rng: &mut ChaCha8Rng, n: usize, block: usize) -> Image<f64> {
        let cells = Image::from_fn(n / block + 1, n / block + 1, |_, _| {
            rng.random_range(0.0..1.0)
        });
        Image::from_fn(n, n, |r, c| cells.get(r / block, c / block))
    }

    fn psnr(a: &Image<f64>, b: &Image<f64>) -> f64 {
        let mse = a.sub(b).frobenius_norm().powi(2) / a.len() as f64;
        10.0 * (1.0 / mse).log10()
    }

    #[test]
    fn beta_schedule() {
        let betas = default_beta_schedule();
        assert_eq!(betas.len(), 6);
        assert_eq!(betas[0], 1.0);
        assert!((betas[2] - 8.0).abs() < 1e-12);
        assert!(*betas.last().unwrap() <= 256.0);
        let mut bad = TvSolverConfig::default();
        bad.betas = vec![1.0, 1.0];
        assert!(bad.validate().is_err());
        bad.betas = vec![1.0];
        bad.lambda = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn total_variation_examples() {
        assert_eq!(total_variation(&Image::<f64>::filled(4, 5, 0.3)), 0.0);
        let checker = Image::<f64>::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(total_variation(&checker), 8.0);
    }

    #[test]
    fn blur_does_not_increase_total_variation() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..20 {
            let img = Image::from_fn(10, 12, |_, _| rng.random_range(0.0..1.0));
            let k = Kernel::normalized(Image::from_fn(3, 4, |_, _| rng.random_range(0.0..1.0)))
                .unwrap();
            let blurred = conv2d_full(&img, k.as_image());
            let embedded = img.embed(blurred.rows(), blurred.cols(), 0, 0).unwrap();
            assert!(total_variation(&blurred) <= total_variation(&embedded) + 1e-9);
        }
    }

    #[test]
    fn shrink_is_soft_threshold() {
        assert_eq!(shrink(3.0, 1.0), 2.0);
        assert_eq!(shrink(-3.0, 1.0), -2.0);
        assert_eq!(shrink(0.5, 1.0), 0.0);
        // Optimality: 0 ∈ sign(w) + β(w - v).
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..100 {
            let v: f64 = rng.random_range(-3.0..3.0);
            let beta: f64 = rng.random_range(0.1..10.0);
            let w = shrink(v, 1.0 / beta);
            if w != 0.0 {
                assert!((w.signum() + beta * (w - v)).abs() < 1e-12);
            } else {
                assert!((beta * v).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn gradient_adjoint_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let x = Image::from_fn(6, 7, |_, _| rng.random_range(-1.0..1.0));
        let px = Image::from_fn(6, 7, |_, _| rng.random_range(-1.0..1.0));
        let py = Image::from_fn(6, 7, |_, _| rng.random_range(-1.0..1.0));
        let (dx, dy) = gradient(&x);
        let lhs: f64 = dx.dot(&px) + dy.dot(&py);
        let rhs = x.dot(&gradient_adjoint(&px, &py));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn quadratic_step_satisfies_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let b = Image::from_fn(20, 18, |_, _| rng.random_range(0.0..1.0));
        let k = gaussian_kernel(5, 1.2);
        let wx = Image::from_fn(20, 18, |_, _| rng.random_range(-0.1..0.1));
        let wy = Image::from_fn(20, 18, |_, _| rng.random_range(-0.1..0.1));
        let step = QuadraticStep::new(&b, &k);
        assert_eq!(step.kernel_transfer().len(), 360);
        let mu = 0.37;
        let x = step.solve(mu, &wx, &wy);
        // Kᵀ(K ⊛ x − b) + μ ∇ᵀ(∇x − w), evaluated in the spatial domain.
        let kt = k.as_image().flipped();
        let kx = circular_convolve(&x, k.as_image());
        let data = circular_convolve(&kx.sub(&b), &kt).roll(-4, -4);
        let (dx, dy) = gradient(&x);
        let reg = gradient_adjoint(&dx.sub(&wx), &dy.sub(&wy)).scaled(mu);
        let residual = data.add(&reg);
        let scale = circular_convolve(&b, &kt).frobenius_norm();
        assert!(residual.frobenius_norm() <= 1e-6 * scale);
    }

    #[test]
    fn impulse_kernel_without_prior_returns_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let b = Image::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0));
        let cfg = TvSolverConfig::with_lambda(0.0);
        let out = tv_deconv(&b, &Kernel::delta(1, 1), &cfg).unwrap();
        assert!(out.image.sub(&b).max_abs() < 1e-8);
    }

    #[test]
    fn restoration_improves_psnr_with_known_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let sharp = blocks(&mut rng, 64, 8);
        let k = gaussian_kernel(7, 1.5);
        let b = conv2d_full(&sharp, k.as_image());
        let out = tv_deconv(&b, &k, &TvSolverConfig::with_lambda(0.001)).unwrap();
        assert_eq!(out.image.shape(), sharp.shape());
        let b_crop = b.crop(3, 3, 64, 64).unwrap();
        let before = psnr(&b_crop, &sharp);
        let after = psnr(&out.image, &sharp);
        assert!(after > before, "{after} <= {before}");
        let lambda = 0.001;
        let init = b.roll(-3, -3);
        assert!(
            canvas_objective(&b, &out.canvas, &k, lambda)
                <= canvas_objective(&b, &init, &k, lambda)
        );
    }

    #[test]
    fn cropped_observation_keeps_its_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let b = blocks(&mut rng, 30, 5);
        let k = gaussian_kernel(5, 1.0);
        let padded = pad_observation(&b, 5, 5);
        assert_eq!(padded.shape(), (34, 34));
        assert_eq!(padded.get(2, 2), b.get(0, 0));
        assert!(padded.get(0, 0).abs() < b.get(0, 0).abs() + 1e-15);
        let out = tv_deconv_with(&b, &k, &TvSolverConfig::default(), Boundary::Crop).unwrap();
        assert_eq!(out.image.shape(), b.shape());
    }

    #[test]
    fn full_objective_checks_sizes() {
        let b = Image::<f64>::zeros(10, 10);
        let img = Image::<f64>::zeros(8, 8);
        let k = Kernel::uniform(3, 3);
        assert!(full_objective(&b, &img, &k, 0.1).is_ok());
        assert!(full_objective(&b, &Image::zeros(7, 8), &k, 0.1).is_err());
    }
}
