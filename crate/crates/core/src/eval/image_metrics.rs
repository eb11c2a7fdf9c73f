//! PSNR and SSIM between rendered and reference images.

use serde::Serialize;

use super::EvalError;
use crate::pfm::FloatImage;

pub const PSNR_CAP_DB: f64 = 99.0;

/// Interleaved multi-channel image with f64 samples, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, EvalError> {
        if data.len() != width * height * channels || channels == 0 {
            return Err(EvalError::DimensionMismatch(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn from_float(img: &FloatImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            channels: img.channels,
            data: img.data.iter().map(|&v| v as f64).collect(),
        }
    }

    fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<(), EvalError> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(EvalError::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, EvalError> {
    same_shape(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, max_value: f64) -> Result<f64, EvalError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / m).log10()).min(PSNR_CAP_DB))
}

const WIN: usize = 11;
const WIN_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; WIN] {
    let mut k = [0.0; WIN];
    let r = (WIN / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * WIN_SIGMA * WIN_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5). Near the border the
/// window is truncated and its weights renormalized. Multi-channel images
/// average the per-channel scores.
pub fn ssim(a: &Image, b: &Image, max_value: f64) -> Result<f64, EvalError> {
    same_shape(a, b)?;
    if a.data.is_empty() {
        return Err(EvalError::DimensionMismatch("empty image".into()));
    }
    let c1 = (0.01 * max_value).powi(2);
    let c2 = (0.03 * max_value).powi(2);
    let k = gaussian_kernel();
    let r = (WIN / 2) as isize;
    let (w, h) = (a.width as isize, a.height as isize);
    let mut total = 0.0;
    for c in 0..a.channels {
        for y in 0..h {
            for x in 0..w {
                let (mut sw, mut ma, mut mb) = (0.0, 0.0, 0.0);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= w {
                            continue;
                        }
                        let wt = k[(dy + r) as usize] * k[(dx + r) as usize];
                        let va = a.at(xx as usize, yy as usize, c);
                        let vb = b.at(xx as usize, yy as usize, c);
                        sw += wt;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                ma /= sw;
                mb /= sw;
                let va = (saa / sw - ma * ma).max(0.0);
                let vb = (sbb / sw - mb * mb).max(0.0);
                let cov = sab / sw - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (a.width * a.height * a.channels) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RenderScores {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn render_scores(rendered: &Image, reference: &Image, max_value: f64) -> Result<RenderScores, EvalError> {
    Ok(RenderScores {
        psnr: psnr(rendered, reference, max_value)?,
        ssim: ssim(rendered, reference, max_value)?,
    })
}
