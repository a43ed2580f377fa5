//! Error metrics and the kernel-error bounds used to judge estimates.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernel::Kernel;
use crate::scalar::Real;
use crate::tensor::Image;

/// Frobenius distance between kernels after the integer shift that maximizes
/// their cross-correlation. Kernels of different sizes are compared on a
/// common grid with the smaller one zero-padded about its center. Mass shifted
/// past the grid still counts, so the value is the minimum over all shifts of
/// `‖S_d K̂ − K‖_F`. Ties go to the shift closest to zero.
pub fn kernel_error<T: Real>(k_est: &Kernel<T>, k_true: &Kernel<T>) -> f64 {
    let rows = k_est.rows().max(k_true.rows());
    let cols = k_est.cols().max(k_true.cols());
    let est = k_est
        .padded_to(rows, cols)
        .expect("target is at least as large");
    let tru = k_true
        .padded_to(rows, cols)
        .expect("target is at least as large");
    let (est, tru) = (est.as_image(), tru.as_image());
    let mut best: Option<(f64, usize, f64)> = None;
    for dr in -(rows as isize - 1)..rows as isize {
        for dc in -(cols as isize - 1)..cols as isize {
            let (corr, dist) = shifted_distance(est, tru, dr, dc);
            let size = dr.unsigned_abs() + dc.unsigned_abs();
            let better = match best {
                None => true,
                Some((c, s, _)) => corr > c || (corr == c && size < s),
            };
            if better {
                best = Some((corr, size, dist));
            }
        }
    }
    best.map(|(_, _, d)| d).unwrap_or(0.0)
}

/// Frobenius distance without any alignment.
pub fn kernel_error_unaligned<T: Real>(k_est: &Kernel<T>, k_true: &Kernel<T>) -> f64 {
    let rows = k_est.rows().max(k_true.rows());
    let cols = k_est.cols().max(k_true.cols());
    let est = k_est
        .padded_to(rows, cols)
        .expect("target is at least as large");
    let tru = k_true
        .padded_to(rows, cols)
        .expect("target is at least as large");
    shifted_distance(est.as_image(), tru.as_image(), 0, 0).1
}

/// Cross-correlation `Σ_p est(p+d) tru(p)` and `‖S_d est − tru‖_F` on the
/// infinite zero-extended grid.
fn shifted_distance<T: Real>(est: &Image<T>, tru: &Image<T>, dr: isize, dc: isize) -> (f64, f64) {
    let (rows, cols) = est.shape();
    let mut corr = 0.0;
    let mut overlap_est = 0.0;
    let mut sq = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let t = tru.get(r, c).to_f64_lossy();
            let (sr, sc) = (r as isize + dr, c as isize + dc);
            let e = if sr >= 0 && sc >= 0 && (sr as usize) < rows && (sc as usize) < cols {
                let v = est.get(sr as usize, sc as usize).to_f64_lossy();
                overlap_est += v * v;
                v
            } else {
                0.0
            };
            corr += e * t;
            sq += (e - t) * (e - t);
        }
    }
    let total_est: f64 = est
        .as_slice()
        .iter()
        .map(|v| v.to_f64_lossy().powi(2))
        .sum();
    // Entries of est shifted off the grid contribute their full square.
    let outside = (total_est - overlap_est).max(0.0);
    (corr, (sq + outside).sqrt())
}

/// Peak signal-to-noise ratio in dB for intensities with the given peak.
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid("PSNR needs images of the same size");
    }
    if a.is_empty() {
        return invalid("PSNR of empty images is undefined");
    }
    let mse = a
        .sub(b)
        .as_slice()
        .iter()
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// PSNR over the reference interior (excluding `margin` pixels on every
/// side), maximized over integer offsets `|d| ≤ max_shift` at which the
/// estimate covers the whole interior. Estimate pixel `p + d` is compared
/// with reference pixel `p`.
pub fn aligned_psnr<T: Real>(
    estimate: &Image<T>,
    reference: &Image<T>,
    margin: usize,
    max_shift: usize,
) -> Result<f64> {
    let (rows, cols) = reference.shape();
    if 2 * margin >= rows || 2 * margin >= cols {
        return invalid("margin leaves no interior to compare");
    }
    let (r0, r1, c0, c1) = (margin, rows - margin, margin, cols - margin);
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    let m = max_shift as isize;
    let mut best: Option<f64> = None;
    for dr in -m..=m {
        for dc in -m..=m {
            let lo_r = r0 as isize + dr;
            let lo_c = c0 as isize + dc;
            let hi_r = r1 as isize + dr;
            let hi_c = c1 as isize + dc;
            if lo_r < 0
                || lo_c < 0
                || hi_r > estimate.rows() as isize
                || hi_c > estimate.cols() as isize
            {
                continue;
            }
            let mut sq = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    let e = estimate.get((r as isize + dr) as usize, (c as isize + dc) as usize);
                    let d = (e - reference.get(r, c)).to_f64_lossy();
                    sq += d * d;
                }
            }
            let value = if sq == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (n / sq).log10()
            };
            if best.is_none_or(|b| value > b) {
                best = Some(value);
            }
        }
    }
    best.ok_or_else(|| {
        crate::error::Error::SizeMismatch(
            "no offset aligns the estimate with the reference interior".into(),
        )
    })
}

/// Noiseless bound `√2 σ_max(B) / σ_min(I₀)`.
pub fn noiseless_bound(sigma_max_blurry: f64, sigma_min_sharp: f64) -> f64 {
    2f64.sqrt() * sigma_max_blurry / sigma_min_sharp
}

/// Noisy bound `√2 (σ_max(B) + ccond(B) √(s₁s₂) ε) / σ_min(I₀)`.
pub fn noisy_bound(
    sigma_max_blurry: f64,
    ccond_blurry: f64,
    sampling: (usize, usize),
    epsilon: f64,
    sigma_min_sharp: f64,
) -> f64 {
    let root = ((sampling.0 * sampling.1) as f64).sqrt();
    2f64.sqrt() * (sigma_max_blurry + ccond_blurry * root * epsilon) / sigma_min_sharp
}

/// Summary of one synthetic experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Shift-aligned Frobenius kernel error.
    pub kernel_error: f64,
    pub noiseless_bound: f64,
    /// Present for noisy runs.
    pub noisy_bound: Option<f64>,
    pub psnr_blurry: Option<f64>,
    pub psnr_restored: Option<f64>,
    /// `σ_max(B) / σ_min(I₀)`.
    pub sigma_ratio: f64,
    pub runtime_secs: f64,
}

impl MetricsReport {
    pub fn within_bounds(&self) -> bool {
        let bound = self.noisy_bound.unwrap_or(self.noiseless_bound);
        self.kernel_error <= bound
    }
}
