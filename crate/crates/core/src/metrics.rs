//! Image quality metrics.
//!
//! [`psnr`] follows the definition used for the reported tables: the peak is
//! `max(x²)` over the reference and the denominator is the *total* squared
//! error, not the mean. [`psnr_conventional`] divides by the mean squared
//! error instead; for a fixed reference the two differ by `10·log10(N)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("empty image".into()));
    }
    Ok(())
}

fn peak_and_error(x: &[f64], x_star: &[f64]) -> Result<(f64, f64)> {
    check_len(x, x_star)?;
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v * v));
    if peak == 0.0 {
        return Err(Error::InvalidParameter("PSNR reference is all zero".into()));
    }
    let sse = x.iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((peak, sse))
}

/// `10·log10(max(x²) / ‖x − x*‖²)` with `x` the reference. Identical inputs
/// give `+∞`.
pub fn psnr(x: &[f64], x_star: &[f64]) -> Result<f64> {
    let (peak, sse) = peak_and_error(x, x_star)?;
    Ok(if sse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak / sse).log10()
    })
}

/// `10·log10(max(x²) / MSE)`.
pub fn psnr_conventional(x: &[f64], x_star: &[f64]) -> Result<f64> {
    let (peak, sse) = peak_and_error(x, x_star)?;
    Ok(if sse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * x.len() as f64 / sse).log10()
    })
}

pub fn rmse(x: &[f64], x_star: &[f64]) -> Result<f64> {
    check_len(x, x_star)?;
    let sse: f64 = x.iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / x.len() as f64).sqrt())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(values: &[f64], width: usize, height: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (width - k + 1, height - k + 1);
    let mut rows = vec![0.0; height * ow];
    for r in 0..height {
        let line = &values[r * width..(r + 1) * width];
        for c in 0..ow {
            rows[r * ow + c] = g.iter().zip(&line[c..c + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = g.iter().enumerate().map(|(i, a)| a * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM over all fully contained 11×11 Gaussian windows
/// (`σ = 1.5`, `K1 = 0.01`, `K2 = 0.03`). The dynamic range `L` is the value
/// range of both images together, which keeps the index symmetric. Two
/// constant, equal images score 1.
pub fn ssim(x: &Image, x_star: &Image) -> Result<f64> {
    x.check_shape(&x_star.shape())?;
    let (w, h) = (x.width(), x.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let (a, b) = (x.values(), x_star.values());
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let range = hi - lo;
    if range == 0.0 {
        return Ok(1.0);
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let g = gaussian_window();
    let blur = |v: &[f64]| filter_valid(v, w, h, &g);
    let products = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(s, t)| s * t).collect() };
    let (mu_a, mu_b) = (blur(a), blur(b));
    let (e_aa, e_bb, e_ab) = (blur(&products(a, a)), blur(&products(b, b)), blur(&products(a, b)));
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub rmse: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(reference: &Image, estimate: &Image) -> Result<Self> {
        reference.check_shape(&estimate.shape())?;
        Ok(Self {
            psnr: psnr(reference.values(), estimate.values())?,
            rmse: rmse(reference.values(), estimate.values())?,
            ssim: ssim(reference, estimate)?,
        })
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageShape;

    #[test]
    fn psnr_hand_values() {
        assert_eq!(psnr(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap(), 0.0);
        assert!((psnr(&[10.0, 0.0], &[10.0, 1.0]).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), f64::INFINITY);
        assert!(psnr(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(psnr(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn conventional_psnr_offset() {
        let x = [3.0, 1.0, 4.0, 1.0, 5.0];
        let y = [2.0, 7.0, 1.0, 8.0, 2.0];
        let d = psnr_conventional(&x, &y).unwrap() - psnr(&x, &y).unwrap();
        assert!((d - 10.0 * 5f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn rmse_hand_values() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert_eq!(rmse(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 2.0);
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn ssim_constant_images() {
        let s = ImageShape::new(12, 12, 1.0).unwrap();
        let a = Image::from_values(s, vec![0.5; 144]).unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let small = Image::zeros(ImageShape::new(8, 8, 1.0).unwrap());
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[7.0]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_none());
    }
}
