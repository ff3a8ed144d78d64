//! Reference-free quality metrics on the luminance channel, plus the
//! log-spectral distance used as the frequency-fidelity proxy.

use latentsr_tensor::{no_grad, Tensor};

use crate::{Error, Result};

/// PSNR is capped here so identical images do not report infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Per-image metric values; `aggregate` is the arithmetic mean.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MetricReport {
    pub psnr_y: f64,
    pub ssim: f64,
    pub log_spectral_distance: f64,
}

/// BT.601 luminance of a `[3,H,W]` image in [-1,1], returned in [0,1].
pub fn luminance(img: &Tensor<f32>) -> Result<Vec<f64>> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Data(format!("luminance expects [3,H,W], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Data(format!("luminance expects 3 channels, got {c}")));
    }
    let plane = h * w;
    let data = img.data();
    let mut y = vec![0.0f64; plane];
    for p in 0..plane {
        let r = (data[p] as f64 + 1.0) / 2.0;
        let g = (data[plane + p] as f64 + 1.0) / 2.0;
        let b = (data[2 * plane + p] as f64 + 1.0) / 2.0;
        y[p] = 0.299 * r + 0.587 * g + 0.114 * b;
    }
    Ok(y)
}

fn check_same_image_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!(
            "{op}: shape {:?} != {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio on luminance, in dB, capped at 100.
pub fn psnr_y(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same_image_shape("psnr_y", a, b)?;
    let ya = luminance(a)?;
    let yb = luminance(b)?;
    let mse: f64 =
        ya.iter().zip(&yb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ya.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as f64 - half;
            let dx = j as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity on luminance: Gaussian 11x11 window, K1=0.01,
/// K2=0.03, dynamic range 1, averaged over valid window positions.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same_image_shape("ssim", a, b)?;
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Data(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let ya = luminance(a)?;
    let yb = luminance(b)?;
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let p = (oy + i) * w + ox + j;
                    let wt = win[i * SSIM_WINDOW + j];
                    mu_a += wt * ya[p];
                    mu_b += wt * yb[p];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let p = (oy + i) * w + ox + j;
                    let wt = win[i * SSIM_WINDOW + j];
                    let da = ya[p] - mu_a;
                    let db = yb[p] - mu_b;
                    var_a += wt * da * da;
                    var_b += wt * db * db;
                    cov += wt * da * db;
                }
            }
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

const LSD_EPS: f64 = 1e-8;

/// RMS difference of the log power spectra of the luminance channels,
/// in dB. Extents must be powers of two (radix-2 transform).
pub fn log_spectral_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same_image_shape("log_spectral_distance", a, b)?;
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let ya = luminance(a)?;
    let yb = luminance(b)?;
    let spec = |y: &[f64]| -> Result<Vec<f64>> {
        let t = Tensor::from_vec(y.to_vec(), &[h, w])?;
        let f = no_grad(|| t.fft2())?;
        Ok(f.re
            .data()
            .iter()
            .zip(f.im.data())
            .map(|(&re, &im)| re * re + im * im)
            .collect())
    };
    let pa = spec(&ya)?;
    let pb = spec(&yb)?;
    let mut acc = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        let d = 10.0 * (x + LSD_EPS).log10() - 10.0 * (y + LSD_EPS).log10();
        acc += d * d;
    }
    Ok((acc / pa.len() as f64).sqrt())
}

pub fn report(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_y: psnr_y(a, b)?,
        ssim: ssim(a, b)?,
        log_spectral_distance: log_spectral_distance(a, b)?,
    })
}

/// Mean of per-image reports.
pub fn aggregate(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len().max(1) as f64;
    MetricReport {
        psnr_y: reports.iter().map(|r| r.psnr_y).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        log_spectral_distance: reports.iter().map(|r| r.log_spectral_distance).sum::<f64>() / n,
    }
}
