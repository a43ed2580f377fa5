//! Desk-scale experiment runners. Every runner is deterministic in its seeds
//! and, when given an output directory, writes one subdirectory per case.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::blind::{default_sampling, BlindProblem, DeblurConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureFilter, FeatureSpec};
use crate::harness::io::{kernel_preview, save_image, save_kernel};
use crate::harness::metrics::{
    aligned_psnr, kernel_error, kernel_error_unaligned, noiseless_bound, noisy_bound, MetricsReport,
};
use crate::harness::synth::{edge_rich_image, synth_blur, KernelFamily, KernelParams, KernelSpec};
use crate::kernel::Kernel;
use crate::qp::QpOptions;
use crate::regularizer::{build_hessian, estimate_kernel};
use crate::spectral::{conv_spectrum, ConvSpectrum};
use crate::tensor::Image;

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    for row in rows {
        writer.serialize(row).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn case_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let dir = root.join(name);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Sampling size at which the sharp image's smallest eigenvalue enters the
/// kernel-error bounds: the size of `K ⊗ κᵢ` for an `m`-kernel and
/// `s`-eigenvector.
pub fn bound_sampling(m: usize, s: usize) -> usize {
    m + s - 1
}

/// `σ_min(I₀)` at [`bound_sampling`] in both directions.
pub fn sharp_sigma_min(
    sharp: &Image<f64>,
    filter: &FeatureFilter<f64>,
    kernel: (usize, usize),
    sampling: (usize, usize),
) -> Result<f64> {
    let spec = conv_spectrum(
        sharp,
        filter,
        bound_sampling(kernel.0, sampling.0),
        bound_sampling(kernel.1, sampling.1),
    )?;
    Ok(spec.sigma_min())
}

#[derive(Clone, Debug)]
pub struct Figure2Options {
    pub kernel: KernelSpec,
    pub kernel_seed: u64,
    pub sampling: (usize, usize),
    pub features: Vec<FeatureSpec>,
}

impl Default for Figure2Options {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::new(KernelFamily::Gaussian, 9),
            kernel_seed: 0,
            sampling: (18, 18),
            features: vec![FeatureSpec::delta(), FeatureSpec::default()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumRow {
    pub feature: String,
    pub index: usize,
    pub sigma_sharp: f64,
    pub sigma_blurred: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Figure2Summary {
    pub feature: String,
    pub sampling_rows: usize,
    pub sampling_cols: usize,
    pub sigma_max_sharp: f64,
    pub sigma_min_sharp: f64,
    pub sigma_max_blurred: f64,
    pub sigma_min_blurred: f64,
    /// `σ_max(B) / σ_min(I)` at equal sampling.
    pub sigma_ratio: f64,
    pub bound: f64,
}

/// Spectra of a sharp image and its blur under each feature.
///
/// Writes `sharp.pgm`, `blurred.pgm`, `spectra.csv` and `summary.csv` when
/// `out` is given.
pub fn run_figure2(
    sharp: &Image<f64>,
    opts: &Figure2Options,
    out: Option<&Path>,
) -> Result<(Vec<Figure2Summary>, Vec<SpectrumRow>)> {
    let kernel: Kernel<f64> = opts.kernel.build(opts.kernel_seed)?;
    let blurred = crate::tensor::conv2d_full(sharp, kernel.as_image());
    let (s1, s2) = opts.sampling;
    let mut summaries = Vec::new();
    let mut spectra = Vec::new();
    for feature in &opts.features {
        let filter = feature.build::<f64>()?;
        let si = conv_spectrum(sharp, &filter, s1, s2)?;
        let sb = conv_spectrum(&blurred, &filter, s1, s2)?;
        let name = feature.kind.to_string();
        for (index, (&a, &b)) in si.eigenvalues().iter().zip(sb.eigenvalues()).enumerate() {
            spectra.push(SpectrumRow {
                feature: name.clone(),
                index,
                sigma_sharp: a,
                sigma_blurred: b,
            });
        }
        summaries.push(Figure2Summary {
            feature: name,
            sampling_rows: s1,
            sampling_cols: s2,
            sigma_max_sharp: si.sigma_max(),
            sigma_min_sharp: si.sigma_min(),
            sigma_max_blurred: sb.sigma_max(),
            sigma_min_blurred: sb.sigma_min(),
            sigma_ratio: sb.sigma_max() / si.sigma_min(),
            bound: noiseless_bound(sb.sigma_max(), si.sigma_min()),
        });
    }
    if let Some(root) = out {
        fs::create_dir_all(root)?;
        save_image(root.join("sharp.pgm"), sharp)?;
        save_image(root.join("blurred.pgm"), &blurred)?;
        save_kernel(root.join("kernel.txt"), &kernel)?;
        write_csv(root.join("spectra.csv"), &spectra)?;
        write_csv(root.join("summary.csv"), &summaries)?;
    }
    Ok((summaries, spectra))
}

/// The six kernels of the kernel-recovery gallery.
pub fn figure3_kernels(size: usize) -> Vec<(&'static str, KernelSpec)> {
    let with = |family, params: KernelParams| KernelSpec {
        family,
        size,
        params,
    };
    let base = KernelParams::default();
    vec![
        (
            "gaussian",
            with(
                KernelFamily::Gaussian,
                KernelParams {
                    sigma: 1.5,
                    ..base.clone()
                },
            ),
        ),
        (
            "motion-short",
            with(
                KernelFamily::MotionLine,
                KernelParams {
                    length: 7.0,
                    angle: 30.0,
                    ..base.clone()
                },
            ),
        ),
        (
            "motion-long",
            with(
                KernelFamily::MotionLine,
                KernelParams {
                    length: 9.0,
                    angle: 120.0,
                    ..base.clone()
                },
            ),
        ),
        (
            "random-sparse",
            with(KernelFamily::RandomSparse, base.clone()),
        ),
        ("curve", with(KernelFamily::Curve, base.clone())),
        (
            "delta",
            with(KernelFamily::Gaussian, KernelParams { sigma: 0.0, ..base }),
        ),
    ]
}

#[derive(Clone, Debug)]
pub struct Figure3Options {
    pub image_size: usize,
    pub kernels: Vec<(&'static str, KernelSpec)>,
    pub feature: FeatureSpec,
    /// Defaults to `⌈1.5m⌉`.
    pub sampling: Option<usize>,
    /// `ε / σ_min(I₀)` per noisy run; `0` is the noiseless case.
    pub noise_ratios: Vec<f64>,
    pub qp: QpOptions<f64>,
}

impl Default for Figure3Options {
    fn default() -> Self {
        Self {
            image_size: 128,
            kernels: figure3_kernels(9),
            feature: FeatureSpec::default(),
            sampling: None,
            noise_ratios: vec![0.0],
            qp: QpOptions::default(),
        }
    }
}

/// One kernel recovered from `h` alone.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Figure3Row {
    pub seed: u64,
    pub kernel: String,
    pub family: String,
    pub noise_ratio: f64,
    pub epsilon: f64,
    pub kernel_error: f64,
    pub kernel_error_unaligned: f64,
    pub noiseless_bound: f64,
    /// Empty for noiseless runs.
    pub noisy_bound: Option<f64>,
    pub sigma_max_blurred: f64,
    pub sigma_min_sharp: f64,
    pub sigma_ratio: f64,
    pub within_bound: bool,
    pub qp_converged: bool,
}

/// Estimates every gallery kernel for every seed and tabulates the errors
/// against the recovery bounds. Cases run in parallel; rows come back in
/// (seed, kernel, noise) order.
pub fn run_figure3(
    seeds: &[u64],
    opts: &Figure3Options,
    out: Option<&Path>,
) -> Result<Vec<Figure3Row>> {
    let cases: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&seed| (0..opts.kernels.len()).map(move |k| (seed, k)))
        .collect();
    let rows: Vec<Vec<Figure3Row>> = cases
        .par_iter()
        .map(|&(seed, k)| figure3_case(seed, &opts.kernels[k], opts, out))
        .collect::<Result<_>>()?;
    let rows: Vec<Figure3Row> = rows.into_iter().flatten().collect();
    if let Some(root) = out {
        fs::create_dir_all(root)?;
        write_csv(root.join("errors.csv"), &rows)?;
    }
    Ok(rows)
}

fn figure3_case(
    seed: u64,
    (name, spec): &(&'static str, KernelSpec),
    opts: &Figure3Options,
    out: Option<&Path>,
) -> Result<Vec<Figure3Row>> {
    let m = spec.size;
    let s = opts.sampling.unwrap_or_else(|| default_sampling(m));
    let filter = opts.feature.build::<f64>()?;
    let sharp: Image<f64> = edge_rich_image(opts.image_size, opts.image_size, seed);
    let k0: Kernel<f64> = spec.build(seed)?;
    let sigma_min_sharp = sharp_sigma_min(&sharp, &filter, (m, m), (s, s))?;
    let mut rows = Vec::new();
    for &ratio in &opts.noise_ratios {
        let epsilon = ratio * sigma_min_sharp;
        let b = synth_blur(&sharp, &k0, epsilon, seed.wrapping_add(1), &filter)?.blurred;
        let spec_b = conv_spectrum(&b, &filter, s, s)?;
        let hessian = build_hessian(&spec_b, m, m)?;
        let (estimate, solution) = estimate_kernel(&hessian, &opts.qp)?;
        let t1 = noiseless_bound(spec_b.sigma_max(), sigma_min_sharp);
        let t2 = (ratio > 0.0)
            .then(|| condition_or_inf(&spec_b))
            .map(|ccond| noisy_bound(spec_b.sigma_max(), ccond, (s, s), epsilon, sigma_min_sharp));
        let err = kernel_error(&estimate, &k0);
        rows.push(Figure3Row {
            seed,
            kernel: name.to_string(),
            family: spec.family.to_string(),
            noise_ratio: ratio,
            epsilon,
            kernel_error: err,
            kernel_error_unaligned: kernel_error_unaligned(&estimate, &k0),
            noiseless_bound: t1,
            noisy_bound: t2,
            sigma_max_blurred: spec_b.sigma_max(),
            sigma_min_sharp,
            sigma_ratio: spec_b.sigma_max() / sigma_min_sharp,
            within_bound: err <= t2.unwrap_or(t1),
            qp_converged: solution.converged,
        });
        if let Some(root) = out {
            let dir = case_dir(root, &format!("seed-{seed}/{name}/noise-{ratio}"))?;
            save_kernel(dir.join("kernel_true.txt"), &k0)?;
            save_kernel(dir.join("kernel_est.txt"), &estimate)?;
            save_image(dir.join("kernel_true.pgm"), &kernel_preview(&k0))?;
            save_image(dir.join("kernel_est.pgm"), &kernel_preview(&estimate))?;
        }
    }
    Ok(rows)
}

fn condition_or_inf(spec: &ConvSpectrum<f64>) -> f64 {
    spec.condition().unwrap_or(f64::INFINITY)
}

/// A seeded synthetic blind-deblurring case.
#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub image_size: usize,
    pub kernel: KernelSpec,
    /// Noise level `‖L(N)‖_F`.
    pub epsilon: f64,
    pub seed: u64,
}

impl SyntheticCase {
    pub fn new(image_size: usize, kernel: KernelSpec, seed: u64) -> Self {
        Self {
            image_size,
            kernel,
            epsilon: 0.0,
            seed,
        }
    }

    /// Sharp image, true kernel and blurred observation.
    pub fn generate(
        &self,
        filter: &FeatureFilter<f64>,
    ) -> Result<(Image<f64>, Kernel<f64>, Image<f64>)> {
        let sharp = edge_rich_image(self.image_size, self.image_size, self.seed);
        let k0: Kernel<f64> = self.kernel.build(self.seed)?;
        let b = synth_blur(&sharp, &k0, self.epsilon, self.seed.wrapping_add(1), filter)?.blurred;
        Ok((sharp, k0, b))
    }

    /// Writes `sharp.pgm`, `blurred.pgm`, `kernel.txt` and `kernel.pgm`.
    pub fn write(&self, filter: &FeatureFilter<f64>, dir: &Path) -> Result<()> {
        let (sharp, k0, b) = self.generate(filter)?;
        fs::create_dir_all(dir)?;
        save_image(dir.join("sharp.pgm"), &sharp)?;
        save_image(dir.join("blurred.pgm"), &b)?;
        save_kernel(dir.join("kernel.txt"), &k0)?;
        save_image(dir.join("kernel.pgm"), &kernel_preview(&k0))?;
        Ok(())
    }
}

/// Outcome of a blind run on a synthetic case.
#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub report: MetricsReport,
    pub result: crate::blind::DeblurResult<f64>,
    pub true_kernel: Kernel<f64>,
}

/// Runs blind deblurring on a synthetic case and scores it against the
/// ground truth. The kernel-error bounds use `cfg.kernel_rows × cfg.kernel_cols`.
pub fn evaluate_case(case: &SyntheticCase, cfg: &DeblurConfig) -> Result<CaseOutcome> {
    let filter = cfg.feature.build::<f64>()?;
    let (sharp, k0, b) = case.generate(&filter)?;
    let started = Instant::now();
    let problem = BlindProblem::new(&b, cfg)?;
    let result = problem.solve()?;
    let runtime_secs = started.elapsed().as_secs_f64();
    let (m1, m2) = (cfg.kernel_rows, cfg.kernel_cols);
    let spec_b = conv_spectrum(&b, &filter, cfg.sample_rows, cfg.sample_cols)?;
    let sigma_min_sharp = sharp_sigma_min(
        &sharp,
        &filter,
        (m1, m2),
        (cfg.sample_rows, cfg.sample_cols),
    )?;
    let t1 = noiseless_bound(spec_b.sigma_max(), sigma_min_sharp);
    let t2 = (case.epsilon > 0.0).then(|| {
        noisy_bound(
            spec_b.sigma_max(),
            condition_or_inf(&spec_b),
            (cfg.sample_rows, cfg.sample_cols),
            case.epsilon,
            sigma_min_sharp,
        )
    });
    let margin = m1.max(m2);
    let report = MetricsReport {
        kernel_error: kernel_error(&result.kernel, &k0),
        noiseless_bound: t1,
        noisy_bound: t2,
        psnr_blurry: Some(aligned_psnr(&b, &sharp, margin, margin)?),
        psnr_restored: Some(aligned_psnr(&result.image, &sharp, margin, margin)?),
        sigma_ratio: spec_b.sigma_max() / sigma_min_sharp,
        runtime_secs,
    };
    Ok(CaseOutcome {
        report,
        result,
        true_kernel: k0,
    })
}
