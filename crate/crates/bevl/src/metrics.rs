//! Image-quality and event-denoising metrics.

use serde::Serialize;
use thiserror::Error;

use crate::event::{EventStream, Label};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {aw}x{ah}x{ac} vs {bw}x{bh}x{bc}")]
    ShapeMismatch {
        aw: usize,
        ah: usize,
        ac: usize,
        bw: usize,
        bh: usize,
        bc: usize,
    },
    #[error("image {width}x{height} is smaller than the {window} window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("stream contains unlabeled events")]
    Unlabeled,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Identical images report this instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(MetricError::ShapeMismatch {
            aw: a.width(),
            ah: a.height(),
            ac: a.channels(),
            bw: b.width(),
            bh: b.height(),
            bc: b.channels(),
        });
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// Peak signal-to-noise ratio in dB over all channels, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(pred: &Image, reference: &Image) -> Result<f64> {
    check_same_shape(pred, reference)?;
    let e = mse(pred.data(), reference.data());
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB))
}

/// Outcome of scale-invariant PSNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsnrStar {
    pub db: f64,
    /// Least-squares intensity scale applied to the prediction.
    pub scale: f64,
    /// True when scaling pushed samples outside `[0, 1]`.
    pub clipped: bool,
    /// True when the prediction was all zero and no scale exists.
    pub degenerate: bool,
}

/// PSNR after the globally optimal intensity rescale
/// `s = <pred, ref> / <pred, pred>` of the prediction, clipped back to
/// `[0, 1]`.
pub fn psnr_star(pred: &Image, reference: &Image) -> Result<PsnrStar> {
    check_same_shape(pred, reference)?;
    let pp: f64 = pred.data().iter().map(|v| v * v).sum();
    if pp == 0.0 {
        return Ok(PsnrStar {
            db: psnr(pred, reference)?,
            scale: 1.0,
            clipped: false,
            degenerate: true,
        });
    }
    let pr: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(p, r)| p * r)
        .sum();
    let scale = pr / pp;
    let mut clipped = false;
    let scaled: Vec<f64> = pred
        .data()
        .iter()
        .map(|&v| {
            let s = scale * v;
            if !(0.0..=1.0).contains(&s) {
                clipped = true;
            }
            s.clamp(0.0, 1.0)
        })
        .collect();
    let scaled = Image::new(pred.width(), pred.height(), pred.channels(), scaled)
        .expect("clamped rescale");
    Ok(PsnrStar {
        db: psnr(&scaled, reference)?,
        scale,
        clipped,
        degenerate: false,
    })
}

/// Side of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over valid (fully interior) windows of
/// the luminance images: Gaussian-weighted 11x11, sigma 1.5.
pub fn ssim(pred: &Image, reference: &Image) -> Result<f64> {
    check_same_shape(pred, reference)?;
    let (w, h) = (pred.width(), pred.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let a = pred.luminance();
    let b = reference.luminance();
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let g = win[i * SSIM_WINDOW + j];
                    ma += g * a.get(x0 + j, y0 + i, 0);
                    mb += g * b.get(x0 + j, y0 + i, 0);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let g = win[i * SSIM_WINDOW + j];
                    let da = a.get(x0 + j, y0 + i, 0) - ma;
                    let db = b.get(x0 + j, y0 + i, 0) - mb;
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            }
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Precision/recall of a denoised stream against simulator labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrfResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kept: usize,
    pub kept_signal: usize,
    pub total_signal: usize,
    /// True when a denominator was empty and the metric defaulted to 0.
    pub degenerate: bool,
}

/// Scores kept events as signal detections: precision over the kept
/// set, recall against the reference stream's signal events.
pub fn event_prf(denoised: &EventStream, reference: &EventStream) -> Result<PrfResult> {
    if !denoised.fully_labeled() || !reference.fully_labeled() {
        return Err(MetricError::Unlabeled);
    }
    let kept = denoised.len();
    let kept_signal = denoised.with_label(Label::Signal).len();
    let total_signal = reference.with_label(Label::Signal).len();
    let mut degenerate = false;
    let precision = if kept == 0 {
        degenerate = true;
        0.0
    } else {
        kept_signal as f64 / kept as f64
    };
    let recall = if total_signal == 0 {
        degenerate = true;
        0.0
    } else {
        kept_signal as f64 / total_signal as f64
    };
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PrfResult {
        precision,
        recall,
        f1,
        kept,
        kept_signal,
        total_signal,
        degenerate,
    })
}

/// One evaluated pair's metrics, as written to report CSVs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub psnr_star: f64,
    pub ssim: f64,
    pub event_precision: f64,
    pub event_recall: f64,
    pub event_f1: f64,
}
