use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use convspec::blind::{default_sampling, BlindProblem, DeblurConfig};
use convspec::harness::config::ConfigFile;
use convspec::harness::experiments::{
    evaluate_case, figure3_kernels, run_figure2, run_figure3, write_csv, Figure2Options,
    Figure3Options, SyntheticCase,
};
use convspec::harness::io::{kernel_preview, load_image, load_kernel, save_image, save_kernel};
use convspec::harness::synth::{edge_rich_image, KernelFamily, KernelParams, KernelSpec};
use convspec::qp::QpOptions;
use convspec::regularizer::estimate_kernel;
use convspec::{
    build_hessian, conv_spectrum, tv_deconv, Boundary, ErrorCategory, FeatureKind, FeatureSpec,
    TvSolverConfig,
};

/// Environment variable naming the directory outputs are written under.
const OUT_DIR_ENV: &str = "CONVSPEC_OUT_DIR";
const DEFAULT_ALPHA: f64 = 1e-5;

/// Process exit status by failure category.
mod exit {
    pub const OTHER: u8 = 1;
    pub const VALIDATION: u8 = 2;
    pub const CONVERGENCE: u8 = 3;
    pub const IO: u8 = 4;
    pub const DEGENERATE: u8 = 5;
}

/// Every key a configuration file may set.
const DEFAULT_TRUE_KERNEL: usize = 9;
/// Extra kernel width the model gets over the true blur in synthetic runs.
const KERNEL_MARGIN: usize = 4;

const CONFIG_KEYS: &[&str] = &[
    "feature",
    "log-sigma",
    "kernel-size",
    "sample-size",
    "alpha",
    "lambda",
    "max-iters",
    "boundary",
    "seed",
    "image-size",
    "family",
    "sigma",
    "length",
    "angle",
    "points",
    "steps",
    "noise",
];

#[derive(Parser, Debug)]
#[command(
    name = "convspec",
    version,
    about = "Blind deblurring from convolution spectra"
)]
struct Cli {
    /// key = value file with defaults for the flags below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory outputs are written under.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "out")]
    out_dir: PathBuf,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convolution eigenvalues of an image.
    Spectrum {
        image: PathBuf,
        /// Also save the eigenvectors of the N smallest eigenvalues as images.
        #[arg(long, value_name = "N")]
        eigenvectors: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Kernel that minimizes the spectral regularizer alone.
    EstimateKernel {
        image: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Non-blind TV deconvolution with a known kernel.
    Deconv {
        image: PathBuf,
        #[arg(long)]
        kernel: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Blind deblurring.
    Deblur {
        image: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Generate a synthetic sharp image, kernel and blur.
    Synth {
        #[command(flatten)]
        case: CaseArgs,
    },
    /// Blind deblurring of a synthetic case, scored against the ground truth.
    Eval {
        #[command(flatten)]
        case: CaseArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Deblur once per α and report the distance of each kernel from δ.
    Sweep {
        image: PathBuf,
        /// Comma-separated α values.
        #[arg(long, value_delimiter = ',', required_unless_present = "bracket")]
        alphas: Vec<f64>,
        /// Locate the smallest α whose kernel departs from δ by more than
        /// `--threshold`, bisecting between the two given values.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        bracket: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.15)]
        threshold: f64,
        #[arg(long, default_value_t = 12)]
        bisect_steps: usize,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Reproduce a figure of the method on synthetic data.
    Repro {
        #[command(subcommand)]
        figure: Figure,
    },
}

#[derive(Subcommand, Debug)]
enum Figure {
    /// Spectra of a sharp and a blurred image under both features.
    Fig2 {
        /// Sharp image; a procedural one is generated when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sample_size: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Kernels recovered from the regularizer alone, with error bounds.
    Fig3 {
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2])]
        seeds: Vec<u64>,
        /// Noise levels as fractions of the sharp image's smallest eigenvalue.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0])]
        noise_ratios: Vec<f64>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        kernel_size: Option<usize>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct ModelArgs {
    /// Feature filter: delta or log.
    #[arg(long)]
    feature: Option<FeatureKind>,
    /// Scale of the LoG feature.
    #[arg(long)]
    log_sigma: Option<f64>,
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Eigenvector sampling size; defaults to ⌈1.5 × kernel size⌉.
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// full (synthetic full convolution) or crop (photograph).
    #[arg(long)]
    boundary: Option<Boundary>,
}

#[derive(Args, Debug, Clone, Default)]
struct CaseArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Kernel family: gaussian, motion-line, random-sparse or curve.
    #[arg(long)]
    family: Option<KernelFamily>,
    /// Size of the true kernel; defaults to the model kernel size.
    #[arg(long)]
    true_kernel_size: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    length: Option<f64>,
    #[arg(long)]
    angle: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Noise level ‖L(N)‖_F.
    #[arg(long)]
    noise: Option<f64>,
}

/// Flags layered over the configuration file over built-in defaults.
struct Settings {
    file: ConfigFile,
}

impl Settings {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let file = match path {
            Some(p) => {
                ConfigFile::load(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => ConfigFile::default(),
        };
        if let Some(key) = file.keys().find(|k| !CONFIG_KEYS.contains(k)) {
            return Err(convspec::Error::Parse(format!("unknown config key '{key}'")).into());
        }
        Ok(Self { file })
    }

    fn pick<V: std::str::FromStr>(&self, flag: Option<V>, key: &str) -> anyhow::Result<Option<V>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => Ok(self.file.value(key)?),
        }
    }

    fn or<V: std::str::FromStr>(
        &self,
        flag: Option<V>,
        key: &str,
        default: V,
    ) -> anyhow::Result<V> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    fn feature(&self, m: &ModelArgs) -> anyhow::Result<FeatureSpec> {
        let defaults = FeatureSpec::default();
        Ok(FeatureSpec {
            kind: self.or(m.feature, "feature", defaults.kind)?,
            log_sigma: self.or(m.log_sigma, "log-sigma", defaults.log_sigma)?,
        })
    }

    fn kernel_size(&self, m: &ModelArgs) -> anyhow::Result<usize> {
        self.pick(m.kernel_size, "kernel-size")?.ok_or_else(|| {
            convspec::Error::InvalidArgument("--kernel-size is required".into()).into()
        })
    }

    fn deblur_config(&self, m: &ModelArgs) -> anyhow::Result<DeblurConfig> {
        self.deblur_config_sized(m, self.kernel_size(m)?)
    }

    fn deblur_config_sized(&self, m: &ModelArgs, size: usize) -> anyhow::Result<DeblurConfig> {
        let mut cfg = DeblurConfig::new(size, self.or(m.alpha, "alpha", DEFAULT_ALPHA)?);
        let s = self.or(m.sample_size, "sample-size", default_sampling(size))?;
        cfg.sample_rows = s;
        cfg.sample_cols = s;
        cfg.lambda = self.or(m.lambda, "lambda", cfg.lambda)?;
        cfg.max_outer = self.or(m.max_iters, "max-iters", cfg.max_outer)?;
        cfg.boundary = self.or(m.boundary, "boundary", cfg.boundary)?;
        cfg.feature = self.feature(m)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn case(&self, c: &CaseArgs, fallback_kernel: Option<usize>) -> anyhow::Result<SyntheticCase> {
        let defaults = KernelParams::default();
        let params = KernelParams {
            sigma: self.or(c.sigma, "sigma", defaults.sigma)?,
            length: self.or(c.length, "length", defaults.length)?,
            angle: self.or(c.angle, "angle", defaults.angle)?,
            points: self.or(c.points, "points", defaults.points)?,
            steps: self.or(c.steps, "steps", defaults.steps)?,
        };
        let size = match c.true_kernel_size.or(fallback_kernel) {
            Some(s) => s,
            None => self.or(None, "kernel-size", DEFAULT_TRUE_KERNEL)?,
        };
        let kernel = KernelSpec {
            family: self.or(c.family, "family", KernelFamily::Gaussian)?,
            size,
            params,
        };
        let mut case = SyntheticCase::new(
            self.or(c.image_size, "image-size", 128)?,
            kernel,
            self.or(c.seed, "seed", 0)?,
        );
        case.epsilon = self.or(c.noise, "noise", 0.0)?;
        Ok(case)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<convspec::Error>() {
            return match err.category() {
                ErrorCategory::Validation => exit::VALIDATION,
                ErrorCategory::Degenerate => exit::DEGENERATE,
                ErrorCategory::Io => exit::IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::OTHER
}

fn read_image(path: &Path) -> anyhow::Result<convspec::Image> {
    load_image(path).with_context(|| format!("reading {}", path.display()))
}

fn output_dir(cli: &Cli, name: &str) -> anyhow::Result<PathBuf> {
    let dir = cli.out_dir.join(name);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    let settings = Settings::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Spectrum {
            image,
            eigenvectors,
            model,
        } => spectrum(cli, &settings, image, *eigenvectors, model),
        Command::EstimateKernel { image, model } => estimate(cli, &settings, image, model),
        Command::Deconv {
            image,
            kernel,
            model,
        } => deconv(cli, &settings, image, kernel, model),
        Command::Deblur { image, model } => deblur(cli, &settings, image, model),
        Command::Synth { case } => {
            let case = settings.case(case, None)?;
            let dir = output_dir(cli, "synth")?;
            case.write(&FeatureSpec::default().build()?, &dir)?;
            println!("wrote {}", dir.display());
            Ok(0)
        }
        Command::Eval { case, model } => eval(cli, &settings, case, model),
        Command::Sweep {
            image,
            alphas,
            bracket,
            threshold,
            bisect_steps,
            model,
        } => sweep(
            cli,
            &settings,
            image,
            alphas,
            bracket.as_deref(),
            *threshold,
            *bisect_steps,
            model,
        ),
        Command::Repro { figure } => repro(cli, &settings, figure),
    }
}

fn spectrum(
    cli: &Cli,
    settings: &Settings,
    image: &Path,
    eigenvectors: Option<usize>,
    model: &ModelArgs,
) -> anyhow::Result<u8> {
    let img = read_image(image)?;
    let filter = settings.feature(model)?.build::<f64>()?;
    let kernel = settings.pick(model.kernel_size, "kernel-size")?;
    let s = match settings.pick(model.sample_size, "sample-size")? {
        Some(s) => s,
        None => default_sampling(kernel.ok_or_else(|| {
            convspec::Error::InvalidArgument("--sample-size or --kernel-size is required".into())
        })?),
    };
    let spec = conv_spectrum(&img, &filter, s, s)?;
    #[derive(serde::Serialize)]
    struct Row {
        index: usize,
        sigma: f64,
    }
    let rows: Vec<Row> = spec
        .eigenvalues()
        .iter()
        .enumerate()
        .map(|(index, &sigma)| Row { index, sigma })
        .collect();
    let dir = output_dir(cli, "spectrum")?;
    write_csv(dir.join("spectrum.csv"), &rows)?;
    let n = spec.len();
    for i in n.saturating_sub(eigenvectors.unwrap_or(0))..n {
        // Signs are arbitrary, so map [-peak, peak] onto [0, 1].
        let v = &spec.eigenvectors()[i];
        let peak = v.max_abs().max(f64::MIN_POSITIVE);
        save_image(
            dir.join(format!("eigenvector-{i}.pgm")),
            &v.map(|x| 0.5 + 0.5 * x / peak),
        )?;
    }
    println!(
        "sampling {s}x{s}: sigma_max {:e} sigma_min {:e}",
        spec.sigma_max(),
        spec.sigma_min()
    );
    if let Some(m) = kernel {
        let h = build_hessian(&spec, m, m)?;
        let (lo, hi) = h.eigenvalue_range();
        println!(
            "regularizer Hessian {m}x{m}: eigenvalues [{lo:e}, {hi:e}], {} clamped",
            h.clamped_count()
        );
    }
    Ok(0)
}

fn estimate(cli: &Cli, settings: &Settings, image: &Path, model: &ModelArgs) -> anyhow::Result<u8> {
    let img = read_image(image)?;
    let m = settings.kernel_size(model)?;
    let s = settings.or(model.sample_size, "sample-size", default_sampling(m))?;
    let filter = settings.feature(model)?.build::<f64>()?;
    let hessian = build_hessian(&conv_spectrum(&img, &filter, s, s)?, m, m)?;
    let (kernel, solution) = estimate_kernel(&hessian, &QpOptions::default())?;
    let dir = output_dir(cli, "estimate-kernel")?;
    save_kernel(dir.join("kernel.txt"), &kernel)?;
    save_image(dir.join("kernel.pgm"), &kernel_preview(&kernel))?;
    println!(
        "kernel {m}x{m}: {} QP iterations, KKT residual {:e}",
        solution.iterations, solution.kkt_residual
    );
    if !solution.converged {
        eprintln!("warning: the QP solver stopped before reaching its tolerance");
        return Ok(exit::CONVERGENCE);
    }
    Ok(0)
}

fn deconv(
    cli: &Cli,
    settings: &Settings,
    image: &Path,
    kernel: &Path,
    model: &ModelArgs,
) -> anyhow::Result<u8> {
    let b = read_image(image)?;
    let k = load_kernel(kernel).with_context(|| format!("reading kernel {}", kernel.display()))?;
    let cfg = TvSolverConfig::with_lambda(settings.or(
        model.lambda,
        "lambda",
        convspec::deconv::DEFAULT_LAMBDA,
    )?);
    let out = tv_deconv(&b, &k, &cfg)?;
    let dir = output_dir(cli, "deconv")?;
    save_image(dir.join("restored.pgm"), &out.image)?;
    println!(
        "{} alternations, last relative change {:e}",
        out.alternations, out.last_change
    );
    Ok(0)
}

fn deblur(cli: &Cli, settings: &Settings, image: &Path, model: &ModelArgs) -> anyhow::Result<u8> {
    let b = read_image(image)?;
    let cfg = settings.deblur_config(model)?;
    let result = BlindProblem::new(&b, &cfg)?.solve()?;
    let dir = output_dir(cli, "deblur")?;
    save_image(dir.join("restored.pgm"), &result.image)?;
    save_kernel(dir.join("kernel.txt"), &result.kernel)?;
    save_image(dir.join("kernel.pgm"), &kernel_preview(&result.kernel))?;
    write_csv(dir.join("trace.csv"), &result.trace)?;
    println!(
        "{} outer iterations, objective {:e}, converged {}",
        result.iterations,
        result.final_objective(),
        result.converged
    );
    Ok(if result.converged {
        0
    } else {
        exit::CONVERGENCE
    })
}

fn eval(cli: &Cli, settings: &Settings, case: &CaseArgs, model: &ModelArgs) -> anyhow::Result<u8> {
    // The model kernel is over-sized by a margin; whichever size is missing
    // follows from the other.
    let (true_size, model_size) = match (
        case.true_kernel_size,
        settings.pick(model.kernel_size, "kernel-size")?,
    ) {
        (t, Some(m)) => (t.unwrap_or(m.saturating_sub(KERNEL_MARGIN).max(1)), m),
        (Some(t), None) => (t, t + KERNEL_MARGIN),
        (None, None) => (DEFAULT_TRUE_KERNEL, DEFAULT_TRUE_KERNEL + KERNEL_MARGIN),
    };
    let cfg = settings.deblur_config_sized(model, model_size)?;
    let case = settings.case(case, Some(true_size))?;
    let outcome = evaluate_case(&case, &cfg)?;
    let dir = output_dir(cli, "eval")?;
    save_image(dir.join("restored.pgm"), &outcome.result.image)?;
    save_kernel(dir.join("kernel.txt"), &outcome.result.kernel)?;
    save_kernel(dir.join("kernel_true.txt"), &outcome.true_kernel)?;
    save_image(
        dir.join("kernel.pgm"),
        &kernel_preview(&outcome.result.kernel),
    )?;
    write_csv(dir.join("trace.csv"), &outcome.result.trace)?;
    let mut report = outcome.report.clone();
    // Wall time stays out of the CSV so reruns compare byte for byte.
    let runtime = std::mem::replace(&mut report.runtime_secs, 0.0);
    #[derive(serde::Serialize)]
    struct Row {
        kernel_error: f64,
        noiseless_bound: f64,
        noisy_bound: Option<f64>,
        psnr_blurry: Option<f64>,
        psnr_restored: Option<f64>,
        sigma_ratio: f64,
        within_bounds: bool,
        iterations: usize,
        converged: bool,
    }
    write_csv(
        dir.join("metrics.csv"),
        &[Row {
            kernel_error: report.kernel_error,
            noiseless_bound: report.noiseless_bound,
            noisy_bound: report.noisy_bound,
            psnr_blurry: report.psnr_blurry,
            psnr_restored: report.psnr_restored,
            sigma_ratio: report.sigma_ratio,
            within_bounds: report.within_bounds(),
            iterations: outcome.result.iterations,
            converged: outcome.result.converged,
        }],
    )?;
    println!(
        "kernel error {:.4} (bound {:.4}), PSNR {:.2} -> {:.2} dB, {} iterations in {runtime:.1} s",
        report.kernel_error,
        report.noisy_bound.unwrap_or(report.noiseless_bound),
        report.psnr_blurry.unwrap_or(f64::NAN),
        report.psnr_restored.unwrap_or(f64::NAN),
        outcome.result.iterations
    );
    Ok(if outcome.result.converged {
        0
    } else {
        exit::CONVERGENCE
    })
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    cli: &Cli,
    settings: &Settings,
    image: &Path,
    alphas: &[f64],
    bracket: Option<&[f64]>,
    threshold: f64,
    steps: usize,
    model: &ModelArgs,
) -> anyhow::Result<u8> {
    let b = read_image(image)?;
    let cfg = settings.deblur_config(model)?;
    let problem = BlindProblem::new(&b, &cfg)?;
    let dir = output_dir(cli, "sweep")?;
    if !alphas.is_empty() {
        let entries = problem.sweep(alphas)?;
        write_csv(dir.join("sweep.csv"), &entries)?;
        for e in &entries {
            println!(
                "alpha {:e}: |K - delta| {:.4}, sharpness {:e}",
                e.alpha, e.delta_distance, e.sharpness
            );
        }
    }
    if let Some(bracket) = bracket {
        let [lo, hi] = bracket else {
            return Err(convspec::Error::InvalidArgument(
                "--bracket takes two values: lo,hi".into(),
            )
            .into());
        };
        let found = problem.locate_threshold(*lo, *hi, threshold, steps)?;
        write_csv(dir.join("threshold.csv"), &found.evaluations)?;
        println!(
            "alpha* ~ {:e} (between {:e} and {:e})",
            found.alpha, found.lower, found.upper
        );
    }
    Ok(0)
}

fn repro(cli: &Cli, settings: &Settings, figure: &Figure) -> anyhow::Result<u8> {
    match figure {
        Figure::Fig2 {
            image,
            image_size,
            seed,
            sample_size,
            sigma,
        } => {
            let sharp = match image {
                Some(path) => read_image(path)?,
                None => {
                    let n = settings.or(*image_size, "image-size", 128)?;
                    edge_rich_image(n, n, settings.or(*seed, "seed", 0)?)
                }
            };
            let mut opts = Figure2Options::default();
            let s = settings.or(*sample_size, "sample-size", opts.sampling.0)?;
            opts.sampling = (s, s);
            opts.kernel.params.sigma = settings.or(*sigma, "sigma", opts.kernel.params.sigma)?;
            let dir = output_dir(cli, "fig2")?;
            let (summary, _) = run_figure2(&sharp, &opts, Some(&dir))?;
            for row in summary {
                println!(
                    "{}: sigma_max(B) / sigma_min(I) = {:.4} (bound {:.4})",
                    row.feature, row.sigma_ratio, row.bound
                );
            }
            Ok(0)
        }
        Figure::Fig3 {
            seeds,
            noise_ratios,
            image_size,
            kernel_size,
        } => {
            if seeds.is_empty() {
                return Err(anyhow!(convspec::Error::InvalidArgument(
                    "--seeds must not be empty".into()
                )));
            }
            let defaults = Figure3Options::default();
            let opts = Figure3Options {
                image_size: settings.or(*image_size, "image-size", defaults.image_size)?,
                kernels: figure3_kernels(settings.or(*kernel_size, "kernel-size", 9)?),
                noise_ratios: noise_ratios.clone(),
                ..defaults
            };
            let dir = output_dir(cli, "fig3")?;
            let rows = run_figure3(seeds, &opts, Some(&dir))?;
            let violations = rows.iter().filter(|r| !r.within_bound).count();
            println!(
                "{} cases, {violations} bound violations; table in {}",
                rows.len(),
                dir.join("errors.csv").display()
            );
            Ok(0)
        }
    }
}
