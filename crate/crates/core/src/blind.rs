//! Blind deblurring by alternating minimization of
//! `‖B − I ⊗ K‖²_F + λ TV(I) + α h(K)` over images `I` and kernels `K ∈ S`.
//!
//! The latent image is kept on the periodic canvas used by
//! [`tv_deconv_canvas`], so the K-step data term is
//! `‖ν(B) − A(J) ν(K)‖²` with `A(J)` the periodic convolution operator of the
//! canvas `J`. Its Gram matrix depends only on the circular autocorrelation of
//! `J` at lags below the kernel size, which is computed with FFTs.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deconv::{
    canvas_objective, pad_observation, total_variation, tv_deconv_canvas, Boundary, TvSolverConfig,
    DEFAULT_LAMBDA,
};
use crate::error::{invalid, Error, Result};
use crate::features::{FeatureFilter, FeatureSpec};
use crate::fourier::{circular_convolve, circular_correlation};
use crate::harness::metrics::kernel_error;
use crate::kernel::Kernel;
use crate::qp::{solve_qp_with, QpOptions, QpProblem, QpSolution};
use crate::regularizer::{build_hessian, RegularizerHessian};
use crate::scalar::Real;
use crate::spectral::{conv_spectrum, sharpness};
use crate::tensor::Image;

pub const DEFAULT_MAX_OUTER: usize = 150;
pub const DEFAULT_KERNEL_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_OBJECTIVE_TOLERANCE: f64 = 1e-8;

/// `⌈1.5 m⌉`.
pub fn default_sampling(m: usize) -> usize {
    (3 * m).div_ceil(2)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeblurConfig {
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    pub sample_rows: usize,
    pub sample_cols: usize,
    /// Kernel regularization weight α.
    pub alpha: f64,
    /// TV weight λ.
    pub lambda: f64,
    pub max_outer: usize,
    /// Frobenius change of the kernel below which the loop may stop.
    pub kernel_tolerance: f64,
    /// Relative objective change below which the loop may stop.
    pub objective_tolerance: f64,
    pub feature: FeatureSpec,
    pub boundary: Boundary,
    pub qp_tolerance: f64,
    pub qp_max_iterations: usize,
    /// Splitting schedule of the image step; its λ is replaced by `lambda`.
    pub tv: TvSolverConfig,
}

impl DeblurConfig {
    /// Square `m × m` kernel with sampling `⌈1.5m⌉` and default weights.
    pub fn new(kernel_size: usize, alpha: f64) -> Self {
        let s = default_sampling(kernel_size);
        Self {
            kernel_rows: kernel_size,
            kernel_cols: kernel_size,
            sample_rows: s,
            sample_cols: s,
            alpha,
            lambda: DEFAULT_LAMBDA,
            max_outer: DEFAULT_MAX_OUTER,
            kernel_tolerance: DEFAULT_KERNEL_TOLERANCE,
            objective_tolerance: DEFAULT_OBJECTIVE_TOLERANCE,
            feature: FeatureSpec::default(),
            boundary: Boundary::Full,
            qp_tolerance: 1e-8,
            qp_max_iterations: 10_000,
            tv: TvSolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_rows == 0 || self.kernel_cols == 0 {
            return invalid("kernel size must be at least 1");
        }
        if self.sample_rows == 0 || self.sample_cols == 0 {
            return invalid("sampling size must be at least 1");
        }
        if self.sample_rows < self.kernel_rows || self.sample_cols < self.kernel_cols {
            log::warn!(
                "sampling {}x{} is smaller than the {}x{} kernel",
                self.sample_rows,
                self.sample_cols,
                self.kernel_rows,
                self.kernel_cols
            );
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return invalid(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.max_outer == 0 {
            return invalid("at least one outer iteration is required");
        }
        if !(self.kernel_tolerance > 0.0)
            || !(self.objective_tolerance > 0.0)
            || !(self.qp_tolerance > 0.0)
        {
            return invalid("tolerances must be positive");
        }
        self.tv_config().validate()
    }

    pub fn tv_config(&self) -> TvSolverConfig {
        TvSolverConfig {
            lambda: self.lambda,
            ..self.tv.clone()
        }
    }
}

/// One outer iteration of the alternating scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Full objective after both steps.
    pub objective: f64,
    pub data_term: f64,
    pub tv_term: f64,
    pub kernel_term: f64,
    /// Frobenius change of the kernel; infinite on the first iteration.
    pub kernel_change: f64,
    pub qp_iterations: usize,
    pub qp_kkt_residual: f64,
    /// Whether the image-step candidate lowered the objective and was kept.
    pub image_accepted: bool,
}

#[derive(Clone, Debug)]
pub struct DeblurResult<T> {
    /// Latent image at the sharp size.
    pub image: Image<T>,
    /// Periodic canvas the size of the (padded) observation.
    pub canvas: Image<T>,
    pub kernel: Kernel<T>,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations: usize,
}

impl<T: Real> DeblurResult<T> {
    pub fn final_objective(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.objective)
    }
}

/// Observation and the α-independent parts of the model: the regularizer
/// Hessian is built once from `B`.
#[derive(Clone, Debug)]
pub struct BlindProblem<T: Real> {
    observation: Image<T>,
    sharp_shape: (usize, usize),
    hessian: RegularizerHessian<T>,
    filter: FeatureFilter<T>,
    config: DeblurConfig,
}

impl<T: Real> BlindProblem<T> {
    pub fn new(b: &Image<T>, config: &DeblurConfig) -> Result<Self> {
        config.validate()?;
        let (m1, m2) = (config.kernel_rows, config.kernel_cols);
        if m1 > b.rows() || m2 > b.cols() {
            return invalid(format!(
                "{m1}x{m2} kernel does not fit the {}x{} observation",
                b.rows(),
                b.cols()
            ));
        }
        let filter = config.feature.build()?;
        let spectrum = conv_spectrum(b, &filter, config.sample_rows, config.sample_cols)?;
        let hessian = build_hessian(&spectrum, m1, m2)?;
        let (observation, sharp_shape) = match config.boundary {
            Boundary::Full => (b.clone(), (b.rows() - m1 + 1, b.cols() - m2 + 1)),
            Boundary::Crop => (pad_observation(b, m1, m2), b.shape()),
        };
        Ok(Self {
            observation,
            sharp_shape,
            hessian,
            filter,
            config: config.clone(),
        })
    }

    pub fn observation(&self) -> &Image<T> {
        &self.observation
    }

    pub fn hessian(&self) -> &RegularizerHessian<T> {
        &self.hessian
    }

    pub fn config(&self) -> &DeblurConfig {
        &self.config
    }

    /// `‖B − J ⊛ K‖²`, `λ TV(J)` and `α h(K)`.
    pub fn objective_terms(
        &self,
        canvas: &Image<T>,
        k: &Kernel<T>,
        alpha: f64,
    ) -> Result<(f64, f64, f64)> {
        let r = self
            .observation
            .sub(&circular_convolve(canvas, k.as_image()));
        let data = r.dot(&r).to_f64_lossy();
        let tv = self.config.lambda * total_variation(canvas).to_f64_lossy();
        let h = alpha * self.hessian.quad_form(k.as_image())?.to_f64_lossy();
        Ok((data, tv, h))
    }

    /// Runs the alternating scheme with the configured α.
    pub fn solve(&self) -> Result<DeblurResult<T>> {
        self.solve_with_alpha(self.config.alpha)
    }

    pub fn solve_with_alpha(&self, alpha: f64) -> Result<DeblurResult<T>> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return invalid(format!("alpha must be nonnegative, got {alpha}"));
        }
        let cfg = &self.config;
        let (m1, m2) = (cfg.kernel_rows, cfg.kernel_cols);
        let tv_cfg = cfg.tv_config();
        let lambda = T::lit(cfg.lambda);
        let b = &self.observation;

        let mut canvas = b.roll(-(((m1 - 1) / 2) as isize), -(((m2 - 1) / 2) as isize));
        let mut kernel: Option<Kernel<T>> = None;
        let mut trace = Vec::new();
        let mut converged = false;
        let mut previous = f64::INFINITY;

        for iteration in 1..=cfg.max_outer {
            // K-step, kept only if it does not raise the objective at the current image.
            let step = kstep_canvas(
                b,
                &canvas,
                &self.hessian,
                T::lit(alpha),
                kernel.as_ref(),
                cfg,
            )?;
            let mut k_new = step.kernel;
            if let Some(old) = &kernel {
                let f_old = self.objective_terms(&canvas, old, alpha)?;
                let f_new = self.objective_terms(&canvas, &k_new, alpha)?;
                if sum3(f_new) > sum3(f_old) {
                    k_new = old.clone();
                }
            }
            let kernel_change = match &kernel {
                Some(old) => k_new
                    .as_image()
                    .sub(old.as_image())
                    .frobenius_norm()
                    .to_f64_lossy(),
                None => f64::INFINITY,
            };

            // I-step from the observation; the candidate replaces the canvas only on improvement.
            let candidate = tv_deconv_canvas(b, &k_new, &tv_cfg, None)?.canvas;
            let current = canvas_objective(b, &canvas, &k_new, lambda).to_f64_lossy();
            let proposed = canvas_objective(b, &candidate, &k_new, lambda).to_f64_lossy();
            let image_accepted = proposed <= current;
            if image_accepted {
                canvas = candidate;
            }

            let (data, tv, h) = self.objective_terms(&canvas, &k_new, alpha)?;
            let objective = data + tv + h;
            trace.push(IterationRecord {
                iteration,
                objective,
                data_term: data,
                tv_term: tv,
                kernel_term: h,
                kernel_change,
                qp_iterations: step.solution.iterations,
                qp_kkt_residual: step.solution.kkt_residual.to_f64_lossy(),
                image_accepted,
            });
            log::debug!("outer {iteration}: objective {objective:.6e}, dK {kernel_change:.3e}");
            kernel = Some(k_new);

            let relative = (previous - objective).abs() / objective.abs().max(f64::MIN_POSITIVE);
            previous = objective;
            if kernel_change < cfg.kernel_tolerance && relative < cfg.objective_tolerance {
                converged = true;
                break;
            }
        }

        let kernel = kernel.expect("at least one outer iteration ran");
        let image = canvas.crop(0, 0, self.sharp_shape.0, self.sharp_shape.1)?;
        let iterations = trace.len();
        if !converged {
            log::warn!("blind deblurring stopped after {iterations} iterations without converging");
        }
        Ok(DeblurResult {
            image,
            canvas,
            kernel,
            trace,
            converged,
            iterations,
        })
    }
}

fn sum3(t: (f64, f64, f64)) -> f64 {
    t.0 + t.1 + t.2
}

/// Blind deblurring of `b` with the settings in `cfg`.
pub fn blind_deblur<T: Real>(b: &Image<T>, cfg: &DeblurConfig) -> Result<DeblurResult<T>> {
    BlindProblem::new(b, cfg)?.solve()
}

/// Kernel step together with the solver report.
#[derive(Clone, Debug)]
pub struct KStep<T> {
    pub kernel: Kernel<T>,
    pub solution: QpSolution<T>,
}

/// Minimizes `‖ν(B) − A(I)ν(K)‖² + α ν(K)ᵀHν(K)` over the simplex.
///
/// `i` is either a periodic canvas of the same size as `b`, or a sharp image
/// of size `(n₁-m₁+1) × (n₂-m₂+1)`, which is zero-embedded so that the data
/// term is the full convolution `I ⊗ K`.
pub fn kstep<T: Real>(
    b: &Image<T>,
    i: &Image<T>,
    hessian: &RegularizerHessian<T>,
    alpha: T,
) -> Result<Kernel<T>> {
    Ok(kstep_with(b, i, hessian, alpha, &QpOptions::default())?.kernel)
}

/// [`kstep`] with explicit solver options.
pub fn kstep_with<T: Real>(
    b: &Image<T>,
    i: &Image<T>,
    hessian: &RegularizerHessian<T>,
    alpha: T,
    opts: &QpOptions<T>,
) -> Result<KStep<T>> {
    let (m1, m2) = hessian.kernel_shape();
    let canvas = if i.shape() == b.shape() {
        i.clone()
    } else if b.rows() + 1 == i.rows() + m1 && b.cols() + 1 == i.cols() + m2 {
        i.embed(b.rows(), b.cols(), 0, 0)?
    } else {
        return Err(Error::SizeMismatch(format!(
            "{}x{} image is neither the {}x{} observation size nor its sharp size for a {m1}x{m2} kernel",
            i.rows(),
            i.cols(),
            b.rows(),
            b.cols()
        )));
    };
    let problem = kstep_problem(b, &canvas, hessian, alpha)?;
    let solution = solve_qp_with(&problem, opts)?;
    Ok(KStep {
        kernel: solution.to_kernel(m1, m2)?,
        solution,
    })
}

/// QP of the kernel step for a canvas the size of `b`.
pub fn kstep_problem<T: Real>(
    b: &Image<T>,
    canvas: &Image<T>,
    hessian: &RegularizerHessian<T>,
    alpha: T,
) -> Result<QpProblem<T>> {
    if canvas.shape() != b.shape() {
        return Err(Error::SizeMismatch(
            "canvas must match the observation".into(),
        ));
    }
    if !(alpha >= T::zero()) {
        return invalid("alpha must be nonnegative");
    }
    let (m1, m2) = hessian.kernel_shape();
    let (n1, n2) = b.shape();
    if m1 > n1 || m2 > n2 {
        return invalid("kernel is larger than the observation");
    }
    let auto = circular_correlation(canvas, canvas);
    let cross = circular_correlation(canvas, b);
    let d = m1 * m2;
    let wrap = |x: isize, n: usize| x.rem_euclid(n as isize) as usize;
    let h = hessian.matrix();
    let q = DMatrix::from_fn(d, d, |a, c| {
        let (u, v) = ((a / m2) as isize, (a % m2) as isize);
        let (u2, v2) = ((c / m2) as isize, (c % m2) as isize);
        auto.get(wrap(u - u2, n1), wrap(v - v2, n2)) + alpha * h[(a, c)]
    });
    let two = T::lit(2.0);
    let lin = DVector::from_fn(d, |a, _| -two * cross.get(a / m2, a % m2));
    QpProblem::new(q, lin)
}

fn kstep_canvas<T: Real>(
    b: &Image<T>,
    canvas: &Image<T>,
    hessian: &RegularizerHessian<T>,
    alpha: T,
    warm: Option<&Kernel<T>>,
    cfg: &DeblurConfig,
) -> Result<KStep<T>> {
    let opts = QpOptions {
        tolerance: T::lit(cfg.qp_tolerance),
        max_iterations: cfg.qp_max_iterations,
        warm_start: warm.map(|k| k.as_slice().to_vec()),
        polish: true,
    };
    let step = kstep_with(b, canvas, hessian, alpha, &opts)?;
    if !step.solution.converged {
        log::debug!(
            "kernel step stopped at KKT residual {:.3e}",
            step.solution.kkt_residual.to_f64_lossy()
        );
    }
    Ok(step)
}

/// Per-α outcome of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub alpha: f64,
    /// Shift-aligned `‖K̂ − δ‖_F`.
    pub delta_distance: f64,
    /// Smallest convolution eigenvalue of the restored image.
    pub sharpness: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> BlindProblem<T> {
    fn sweep_entry(&self, alpha: f64) -> Result<SweepEntry> {
        let result = self.solve_with_alpha(alpha)?;
        let (m1, m2) = result.kernel.shape();
        let delta_distance = kernel_error(&result.kernel, &Kernel::delta(m1, m2));
        let sharp = sharpness(
            &result.image,
            &self.filter,
            self.config.sample_rows,
            self.config.sample_cols,
        )
        .map(|v| v.to_f64_lossy())
        .unwrap_or(0.0);
        Ok(SweepEntry {
            alpha,
            delta_distance,
            sharpness: sharp,
            objective: result.final_objective(),
            iterations: result.iterations,
            converged: result.converged,
        })
    }

    /// Runs one deblur per α concurrently; entries follow the input order.
    pub fn sweep(&self, alphas: &[f64]) -> Result<Vec<SweepEntry>> {
        if alphas.is_empty() {
            return invalid("alpha sweep needs at least one value");
        }
        alphas.par_iter().map(|&a| self.sweep_entry(a)).collect()
    }

    /// Bisection on `log α` for the smallest α whose kernel lies farther than
    /// `threshold` from δ. Needs `lo` below and `hi` above the transition.
    pub fn locate_threshold(
        &self,
        lo: f64,
        hi: f64,
        threshold: f64,
        steps: usize,
    ) -> Result<AlphaThreshold> {
        if !(lo > 0.0 && hi > lo) {
            return invalid("bisection needs 0 < lo < hi");
        }
        let ends = self.sweep(&[lo, hi])?;
        if ends[0].delta_distance > threshold {
            return invalid(format!("kernel already departs from δ at α = {lo}"));
        }
        if ends[1].delta_distance <= threshold {
            return invalid(format!("kernel still near δ at α = {hi}"));
        }
        let mut evaluations = ends;
        let (mut lo, mut hi) = (lo, hi);
        for _ in 0..steps {
            let mid = (lo * hi).sqrt();
            let entry = self.sweep_entry(mid)?;
            if entry.delta_distance > threshold {
                hi = mid;
            } else {
                lo = mid;
            }
            evaluations.push(entry);
        }
        Ok(AlphaThreshold {
            alpha: (lo * hi).sqrt(),
            lower: lo,
            upper: hi,
            evaluations,
        })
    }
}

/// Bracket of the no-blur threshold α*.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaThreshold {
    pub alpha: f64,
    pub lower: f64,
    pub upper: f64,
    pub evaluations: Vec<SweepEntry>,
}

/// Deblurs `b` once per α, reusing the regularizer.
pub fn alpha_sweep<T: Real>(
    b: &Image<T>,
    cfg: &DeblurConfig,
    alphas: &[f64],
) -> Result<Vec<SweepEntry>> {
    BlindProblem::new(b, cfg)?.sweep(alphas)
}
