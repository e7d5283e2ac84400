//! Image quality metrics: PSNR, SSIM and the luma conversion used for
//! Y-channel evaluation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Reported PSNR when the images are (numerically) identical.
pub const PSNR_CAP_DB: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.numel().max(1) as f64)
}

/// PSNR from a mean squared error and a peak value.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// PSNR of images stored on the `[0, 2ⁿ−1]` scale.
pub fn psnr<T: Scalar>(test: &Tensor<T>, reference: &Tensor<T>, bits: u32) -> Result<f64> {
    let peak = ((1u64 << bits) - 1) as f64;
    Ok(psnr_from_mse(mse(test, reference)?, peak))
}

/// PSNR of images stored on the `[0, 1]` scale.
pub fn psnr_unit<T: Scalar>(test: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(test, reference)?, 1.0))
}

/// Normalized 11×11 Gaussian window, row-major.
fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, win: &[f64], range: f64) -> f64 {
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..SSIM_WINDOW {
                let row = (i + a) * w + j;
                for b in 0..SSIM_WINDOW {
                    let k = win[a * SSIM_WINDOW + b];
                    let (p, q) = (x[row + b], y[row + b]);
                    mx += k * p;
                    my += k * q;
                    xx += k * p * p;
                    yy += k * q * q;
                    xy += k * p * q;
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (oh * ow) as f64
}

/// Mean SSIM over the valid window positions, averaged across samples and
/// channels. `range` is the data range (1 for `[0,1]` images).
pub fn ssim<T: Scalar>(test: &Tensor<T>, reference: &Tensor<T>, range: f64) -> Result<f64> {
    same_shape("ssim", test, reference)?;
    let s = test.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", s.h, s.w),
        ));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            if test.plane(n, c) == reference.plane(n, c) {
                total += 1.0;
                continue;
            }
            let x: Vec<f64> = test.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let y: Vec<f64> = reference.plane(n, c).iter().map(|v| v.as_f64()).collect();
            total += ssim_plane(&x, &y, s.h, s.w, &win, range);
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

/// Studio-swing BT.601 luma of an RGB image in `[0,1]`; output lies in
/// `[16/255, 235/255]`.
pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::shape("rgb_to_y", format!("expected 3 channels, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, h, w| {
        let r = img.at(n, 0, h, w).as_f64();
        let g = img.at(n, 1, h, w).as_f64();
        let b = img.at(n, 2, h, w).as_f64();
        T::from_f64((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    Rgb,
    Y,
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelMode::Rgb => "rgb",
            ChannelMode::Y => "y",
        })
    }
}

impl FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ChannelMode::Rgb),
            "y" => Ok(ChannelMode::Y),
            _ => Err(Error::Invalid(format!("unknown channel mode '{s}' (expected rgb or y)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mode: ChannelMode,
    pub bits: u32,
}

impl MetricReport {
    /// Compares two RGB images stored on the `[0,1]` scale.
    pub fn compute<T: Scalar>(test: &Tensor<T>, reference: &Tensor<T>, mode: ChannelMode) -> Result<Self> {
        let (a, b) = match mode {
            ChannelMode::Rgb => {
                same_shape("metrics", test, reference)?;
                (test.clone(), reference.clone())
            }
            ChannelMode::Y => (rgb_to_y(test)?, rgb_to_y(reference)?),
        };
        Ok(MetricReport {
            psnr_db: psnr_unit(&a, &b)?,
            ssim: ssim(&a, &b, 1.0)?,
            mode,
            bits: 8,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "psnr_db={:.4} ssim={:.6} mode={}", self.psnr_db, self.ssim, self.mode)
    }
}
