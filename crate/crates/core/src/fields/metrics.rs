//! PSNR and SSIM with peak / dynamic range 1.

use rayon::prelude::*;

use super::Field;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::shape("non-empty input", 0));
    }
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// `+inf` when the inputs are identical.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr_values(a: &[f32], b: &[f32]) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr(a: &Field, b: &Field) -> Result<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(format!("{sa:?}"), format!("{sb:?}")));
    }
    psnr_values(a.values(), b.values())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn ssim_term(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Global-statistics SSIM over the whole plane.
pub fn ssim_global(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let mu_a = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mu_b = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - mu_a, y as f64 - mu_b);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    ssim_term(mu_a, mu_b, va / n, vb / n, cov / n)
}

/// Windowed SSIM on one `width × height` plane (row-major).
pub fn ssim_plane(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != width * height {
        return Err(Error::shape(format!("{width}x{height} planes"), format!("{} and {}", a.len(), b.len())));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Ok(ssim_global(a, b));
    }
    let w = gaussian_window();
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    // horizontal pass over the five moment images
    let mut rows = vec![[0.0f64; 5]; ow * height];
    for y in 0..height {
        for x in 0..ow {
            let mut acc = [0.0; 5];
            for (t, &wt) in w.iter().enumerate() {
                let i = y * width + x + t;
                let (p, q) = (a[i] as f64, b[i] as f64);
                acc[0] += wt * p;
                acc[1] += wt * q;
                acc[2] += wt * p * p;
                acc[3] += wt * q * q;
                acc[4] += wt * p * q;
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let mut m = [0.0; 5];
            for (t, &wt) in w.iter().enumerate() {
                let r = rows[(y + t) * ow + x];
                for k in 0..5 {
                    m[k] += wt * r[k];
                }
            }
            let var_a = m[2] - m[0] * m[0];
            let var_b = m[3] - m[1] * m[1];
            let cov = m[4] - m[0] * m[1];
            total += ssim_term(m[0], m[1], var_a, var_b, cov);
        }
    }
    Ok(total / (ow * oh) as f64)
}

/// RGB is scored on luma; volumes as the mean over z-slices.
pub fn ssim(a: &Field, b: &Field) -> Result<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(format!("{sa:?}"), format!("{sb:?}")));
    }
    match (a, b) {
        (Field::Rgb(x), Field::Rgb(y)) => ssim_plane(&x.luma(), &y.luma(), x.width(), x.height()),
        (Field::Scalar(x), Field::Scalar(y)) => {
            let (w, h) = (x.dims()[0], x.dims()[1]);
            let scores: Vec<f64> = (0..x.depth())
                .into_par_iter()
                .map(|k| ssim_plane(x.slice_z(k), y.slice_z(k), w, h))
                .collect::<Result<_>>()?;
            Ok(scores.iter().sum::<f64>() / scores.len() as f64)
        }
        _ => unreachable!("shapes already compared"),
    }
}
