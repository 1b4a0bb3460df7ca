//! Image quality metrics: MSE, PSNR and SSIM.
//!
//! All accumulation runs in `f64`. PSNR of identical images is capped at
//! 100 dB so reports never contain infinities.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor3;

/// PSNR value reported for a zero-MSE pair.
pub const PSNR_CAP_DB: f64 = 100.0;

/// SSIM window side (uniform window).
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_DYNAMIC_RANGE: f64 = 1.0;

/// Quality summary for one image pair.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl MetricReport {
    /// Computes all metrics for a pair of same-shaped tensors.
    pub fn between(a: &Tensor3, b: &Tensor3, peak: f64) -> Result<Self> {
        Ok(MetricReport {
            psnr_db: psnr(a, b, peak)?,
            ssim: ssim(a, b)?,
            mse: mse(a, b)?,
        })
    }
}

fn check_same_shape(a: &Tensor3, b: &Tensor3) -> Result<()> {
    if !a.same_shape(b) {
        return Err(CoreError::shape_mismatch(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.len() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB: `10*log10(peak^2 / MSE)`, 100 dB when MSE = 0.
pub fn psnr(a: &Tensor3, b: &Tensor3, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(CoreError::InvalidArgument(format!("peak {peak} must be > 0")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Mean SSIM over all valid 7×7 windows, averaged across channels.
///
/// Uniform window, K1 = 0.01, K2 = 0.03, dynamic range 1. Inputs are expected
/// in `[0, 1]`; both images must be at least the window size on each side.
pub fn ssim(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::InvalidArgument(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE).powi(2);
    let win = SSIM_WINDOW;
    let area = (win * win) as f64;

    // Summed-area tables per channel over a, b, a^2, b^2, ab.
    let mut total = 0.0f64;
    let mut count = 0usize;
    let stride = w + 1;
    let mut sat = vec![0.0f64; 5 * (h + 1) * stride];
    for ch in 0..c {
        sat.iter_mut().for_each(|v| *v = 0.0);
        let (sa, rest) = sat.split_at_mut((h + 1) * stride);
        let (sb, rest) = rest.split_at_mut((h + 1) * stride);
        let (saa, rest) = rest.split_at_mut((h + 1) * stride);
        let (sbb, sab) = rest.split_at_mut((h + 1) * stride);
        for r in 0..h {
            for col in 0..w {
                let x = a.get(r, col, ch) as f64;
                let y = b.get(r, col, ch) as f64;
                let i = (r + 1) * stride + col + 1;
                let up = i - stride;
                for (table, v) in [
                    (&mut *sa, x),
                    (&mut *sb, y),
                    (&mut *saa, x * x),
                    (&mut *sbb, y * y),
                    (&mut *sab, x * y),
                ] {
                    table[i] = v + table[i - 1] + table[up] - table[up - 1];
                }
            }
        }
        let window_sum = |t: &[f64], r0: usize, c0: usize| {
            let r1 = r0 + win;
            let c1i = c0 + win;
            t[r1 * stride + c1i] - t[r0 * stride + c1i] - t[r1 * stride + c0] + t[r0 * stride + c0]
        };
        for r0 in 0..=(h - win) {
            for c0 in 0..=(w - win) {
                let mu_a = window_sum(sa, r0, c0) / area;
                let mu_b = window_sum(sb, r0, c0) / area;
                let var_a = window_sum(saa, r0, c0) / area - mu_a * mu_a;
                let var_b = window_sum(sbb, r0, c0) / area - mu_b * mu_b;
                let cov = window_sum(sab, r0, c0) / area - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
