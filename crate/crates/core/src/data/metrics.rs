//! PSNR and windowed SSIM.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 8;

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` in decibels; identical inputs give `+∞`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if !(peak > 0.0) {
        return Err(Error::contract("psnr", "peak must be positive"));
    }
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Channel-mean grayscale of an `(H, W, C)` image stored at `offset` in `data`.
fn grayscale<T: Real>(data: &[T], h: usize, w: usize, c: usize) -> Vec<f64> {
    (0..h * w)
        .map(|p| data[p * c..(p + 1) * c].iter().map(|v| v.as_f64()).sum::<f64>() / c as f64)
        .collect()
}

fn ssim_gray(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (va, vb) = (a[y * w + x], b[y * w + x]);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// SSIM of two `(H, W, C)` images over every 8×8 window of their
/// channel-mean grayscale.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let &[h, w, c] = a.shape() else {
        return Err(Error::contract("ssim", format!("expected (H,W,C) image, got {:?}", a.shape())));
    };
    check_window(h, w)?;
    let ga = grayscale(a.data(), h, w, c);
    let gb = grayscale(b.data(), h, w, c);
    Ok(ssim_gray(&ga, &gb, h, w, peak))
}

fn check_window(h: usize, w: usize) -> Result<()> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!("{}x{} image is smaller than the {}x{} window", h, w, SSIM_WINDOW, SSIM_WINDOW),
        ));
    }
    Ok(())
}

/// Mean SSIM over all frames of two `(B, T, H, W, C)` videos.
pub fn video_ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let [bb, t, h, w, c] = a.dims5()?;
    check_window(h, w)?;
    let frame = h * w * c;
    let total: f64 = (0..bb * t)
        .map(|f| {
            let ga = grayscale(&a.data()[f * frame..(f + 1) * frame], h, w, c);
            let gb = grayscale(&b.data()[f * frame..(f + 1) * frame], h, w, c);
            ssim_gray(&ga, &gb, h, w, peak)
        })
        .sum();
    Ok(total / (bb * t) as f64)
}
