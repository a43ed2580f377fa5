//! Seeded synthetic test cases: kernel families, procedural sharp images and
//! noisy blurs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::FeatureFilter;
use crate::kernel::Kernel;
use crate::scalar::Real;
use crate::tensor::{conv2d_full, Image};

/// Subsamples per pixel side when rasterizing motion segments.
const SUPERSAMPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Gaussian,
    MotionLine,
    RandomSparse,
    Curve,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Gaussian,
        KernelFamily::MotionLine,
        KernelFamily::RandomSparse,
        KernelFamily::Curve,
    ];
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::MotionLine => "motion-line",
            KernelFamily::RandomSparse => "random-sparse",
            KernelFamily::Curve => "curve",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "motion-line" | "motion" => Ok(KernelFamily::MotionLine),
            "random-sparse" | "sparse" => Ok(KernelFamily::RandomSparse),
            "curve" => Ok(KernelFamily::Curve),
            other => invalid(format!("unknown kernel family '{other}'")),
        }
    }
}

/// Family-specific shape parameters. Fields a family does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    /// Motion segment length in pixels.
    pub length: f64,
    /// Motion segment angle in degrees, counterclockwise from the +x axis.
    pub angle: f64,
    /// Support points of a sparse kernel.
    pub points: usize,
    /// Random-walk steps of a curve kernel.
    pub steps: usize,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            length: 7.0,
            angle: 30.0,
            points: 6,
            steps: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub size: usize,
    pub params: KernelParams,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, size: usize) -> Self {
        Self {
            family,
            size,
            params: KernelParams::default(),
        }
    }

    pub fn build<T: Real>(&self, seed: u64) -> Result<Kernel<T>> {
        make_kernel(self.family, self.size, &self.params, seed)
    }
}

/// Generates a `size × size` kernel of the given family. Deterministic in `seed`.
pub fn make_kernel<T: Real>(
    family: KernelFamily,
    size: usize,
    params: &KernelParams,
    seed: u64,
) -> Result<Kernel<T>> {
    if size == 0 {
        return invalid("kernel size must be positive");
    }
    if size % 2 == 0 {
        log::debug!("even kernel size {size}; the center rounds toward the top-left");
    }
    let grid = match family {
        KernelFamily::Gaussian => gaussian(size, params.sigma)?,
        KernelFamily::MotionLine => motion_line(size, params.length, params.angle)?,
        KernelFamily::RandomSparse => random_sparse(size, params.points, seed)?,
        KernelFamily::Curve => curve(size, params.steps, seed)?,
    };
    Kernel::normalized(grid.cast())
}

fn center(size: usize) -> f64 {
    ((size - 1) / 2) as f64
}

fn gaussian(size: usize, sigma: f64) -> Result<Image<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return invalid(format!("gaussian sigma must be nonnegative, got {sigma}"));
    }
    let c = center(size);
    if sigma == 0.0 {
        return Ok(Kernel::<f64>::delta(size, size).into_image());
    }
    Ok(Image::from_fn(size, size, |r, col| {
        let (y, x) = (r as f64 - c, col as f64 - c);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    }))
}

/// Area coverage of a width-one segment centered on the kernel center.
fn motion_line(size: usize, length: f64, angle_deg: f64) -> Result<Image<f64>> {
    if !(length > 0.0) || !length.is_finite() || !angle_deg.is_finite() {
        return invalid(format!("motion length must be positive, got {length}"));
    }
    let c = center(size);
    let theta = angle_deg.to_radians();
    let (dir_x, dir_y) = (theta.cos(), -theta.sin());
    let half = length / 2.0;
    let step = 1.0 / SUPERSAMPLE as f64;
    let grid = Image::from_fn(size, size, |r, col| {
        let mut hits = 0usize;
        for i in 0..SUPERSAMPLE {
            for j in 0..SUPERSAMPLE {
                let y = r as f64 - c + (i as f64 + 0.5) * step - 0.5;
                let x = col as f64 - c + (j as f64 + 0.5) * step - 0.5;
                let along = x * dir_x + y * dir_y;
                let across = -x * dir_y + y * dir_x;
                if along.abs() <= half && across.abs() <= 0.5 {
                    hits += 1;
                }
            }
        }
        hits as f64
    });
    if grid.is_zero() {
        return invalid("motion segment misses every pixel");
    }
    Ok(grid)
}

fn random_sparse(size: usize, points: usize, seed: u64) -> Result<Image<f64>> {
    if points == 0 {
        return invalid("a sparse kernel needs at least one support point");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = size / 4;
    let span = size - 2 * margin;
    let mut grid = Image::zeros(size, size);
    for _ in 0..points {
        let r = margin + rng.random_range(0..span);
        let c = margin + rng.random_range(0..span);
        let w: f64 = rng.random_range(0.2..1.0);
        grid.set(r, c, grid.get(r, c) + w);
    }
    Ok(grid)
}

/// Smooth random walk, recentered on its centroid and scaled to fit, splatted
/// bilinearly.
fn curve(size: usize, steps: usize, seed: u64) -> Result<Image<f64>> {
    if steps == 0 {
        return invalid("a curve kernel needs at least one step");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turn = Normal::new(0.0, 0.35).expect("positive deviation");
    let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pts = vec![(0.0f64, 0.0f64)];
    for _ in 0..steps {
        heading += turn.sample(&mut rng);
        let (x, y) = *pts.last().unwrap();
        pts.push((x + 0.5 * heading.cos(), y + 0.5 * heading.sin()));
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (mx / n, my / n);
    let reach = pts
        .iter()
        .map(|(x, y)| (x - mx).abs().max((y - my).abs()))
        .fold(0.0f64, f64::max);
    let room = center(size).min((size - 1) as f64 - center(size)) - 0.5;
    let scale = if reach > room && reach > 0.0 {
        room.max(0.0) / reach
    } else {
        1.0
    };
    let c = center(size);
    let mut grid = Image::zeros(size, size);
    for (x, y) in pts {
        let px = c + (x - mx) * scale;
        let py = c + (y - my) * scale;
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                let (r, col) = (y0 as isize + dy as isize, x0 as isize + dx as isize);
                if r >= 0 && col >= 0 && (r as usize) < size && (col as usize) < size {
                    let (r, col) = (r as usize, col as usize);
                    grid.set(r, col, grid.get(r, col) + wx * wy);
                }
            }
        }
    }
    Ok(grid)
}

/// Procedural test image with intensities in `[0, 1]`: a shaded background,
/// random polygons, bars, a checkerboard patch and a step edge.
pub fn edge_rich_image<T: Real>(rows: usize, cols: usize, seed: u64) -> Image<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rows as f64, cols as f64);
    let gx: f64 = rng.random_range(-0.2..0.2);
    let gy: f64 = rng.random_range(-0.2..0.2);
    let mut img = Image::from_fn(rows, cols, |r, c| {
        0.5 + gx * (c as f64 / w - 0.5) + gy * (r as f64 / h - 0.5)
    });

    // Step edge across the image.
    let step_level: f64 = rng.random_range(0.15..0.35);
    let edge_col = cols / 3 + rng.random_range(0..cols.max(3) / 3);
    for r in 0..rows {
        for c in edge_col..cols {
            img.set(r, c, img.get(r, c) - step_level);
        }
    }

    let polygons = 6 + (rows * cols) / 6000;
    for _ in 0..polygons {
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        let radius = rng.random_range(0.06..0.2) * w.min(h);
        let sides = rng.random_range(3..7usize);
        let rot: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let verts: Vec<(f64, f64)> = (0..sides)
            .map(|i| {
                let a = rot + std::f64::consts::TAU * i as f64 / sides as f64;
                let rr = radius * rng.random_range(0.6..1.0);
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        let level: f64 = rng.random_range(0.05..0.95);
        fill_polygon(&mut img, &verts, level);
    }

    let bars = 3;
    for _ in 0..bars {
        let horizontal = rng.random_bool(0.5);
        let thickness = rng.random_range(2..6usize);
        let level: f64 = rng.random_range(0.0..1.0);
        if horizontal {
            let r0 = rng.random_range(0..rows.saturating_sub(thickness).max(1));
            let c0 = rng.random_range(0..cols / 2 + 1);
            let c1 = (c0 + cols / 2).min(cols);
            for r in r0..(r0 + thickness).min(rows) {
                for c in c0..c1 {
                    img.set(r, c, level);
                }
            }
        } else {
            let c0 = rng.random_range(0..cols.saturating_sub(thickness).max(1));
            let r0 = rng.random_range(0..rows / 2 + 1);
            let r1 = (r0 + rows / 2).min(rows);
            for r in r0..r1 {
                for c in c0..(c0 + thickness).min(cols) {
                    img.set(r, c, level);
                }
            }
        }
    }

    let cell = 4 + rng.random_range(0..4usize);
    let patch = (rows.min(cols) / 4).max(cell);
    let pr = rng.random_range(0..rows.saturating_sub(patch).max(1));
    let pc = rng.random_range(0..cols.saturating_sub(patch).max(1));
    for r in pr..(pr + patch).min(rows) {
        for c in pc..(pc + patch).min(cols) {
            let on = ((r - pr) / cell + (c - pc) / cell) % 2 == 0;
            img.set(r, c, if on { 0.9 } else { 0.1 });
        }
    }

    img.map(|v| v.clamp(0.0, 1.0)).cast()
}

fn fill_polygon(img: &mut Image<f64>, verts: &[(f64, f64)], level: f64) {
    let (rows, cols) = img.shape();
    for r in 0..rows {
        let y = r as f64 + 0.5;
        for c in 0..cols {
            let x = c as f64 + 0.5;
            let mut inside = false;
            let mut j = verts.len() - 1;
            for i in 0..verts.len() {
                let (xi, yi) = verts[i];
                let (xj, yj) = verts[j];
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            if inside {
                img.set(r, c, level);
            }
        }
    }
}

/// Blurred observation and the noise that was added to it.
#[derive(Clone, Debug)]
pub struct SyntheticBlur<T> {
    pub blurred: Image<T>,
    pub noise: Image<T>,
}

/// `B = I₀ ⊗ K + N` with seeded Gaussian `N` rescaled so that the feature
/// response satisfies `‖L(N)‖_F = ε`.
pub fn synth_blur<T: Real>(
    sharp: &Image<T>,
    k: &Kernel<T>,
    epsilon: f64,
    seed: u64,
    filter: &FeatureFilter<T>,
) -> Result<SyntheticBlur<T>> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return invalid(format!("noise level must be nonnegative, got {epsilon}"));
    }
    let clean = conv2d_full(sharp, k.as_image());
    let (rows, cols) = clean.shape();
    if epsilon == 0.0 {
        return Ok(SyntheticBlur {
            blurred: clean,
            noise: Image::zeros(rows, cols),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit deviation");
    let raw: Image<f64> = Image::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
    let raw: Image<T> = raw.cast();
    let response = filter.apply(&raw).frobenius_norm();
    if response <= T::zero() {
        return Err(Error::DegenerateInput(
            "the feature filter annihilates the noise sample".into(),
        ));
    }
    let noise = raw.scaled(T::lit(epsilon) / response);
    Ok(SyntheticBlur {
        blurred: clean.add(&noise),
        noise,
    })
}
