//! Gradient-guided event denoising.
//!
//! A per-pixel threshold map is the window mean of reflectance gradient
//! magnitudes, floored globally. Pixels whose gradient falls inside a
//! narrow band around the threshold are suppressed; events elsewhere are
//! kept. Filtering a labeled stream this way yields the pseudo-label
//! polarity targets the denoiser network trains against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{rasterize_counts, to_polarity_map, EventError, EventStream, PolarityMap};
use crate::image::Image;
use crate::retinex::GradientMap;

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("window {window} exceeds limit {limit} for this geometry")]
    WindowTooLarge { window: usize, limit: usize },
    #[error("{what}: {aw}x{ah} vs {bw}x{bh}")]
    ShapeMismatch {
        what: &'static str,
        aw: usize,
        ah: usize,
        bw: usize,
        bh: usize,
    },
    #[error(transparent)]
    Event(#[from] EventError),
}

pub type Result<T> = std::result::Result<T, DenoiseError>;

/// Band placement relative to the adaptive threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// Suppress gradients strictly inside `(q - mu, q + mu)`; values at
    /// or beyond either edge are kept.
    #[default]
    TwoSided,
    /// Keep only gradients strictly above `q + mu`.
    HighPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    /// Side of the square averaging window; odd, at least 3.
    pub window_size: usize,
    /// Half-width `mu` of the suppression band, in gradient units.
    pub band_halfwidth: f64,
    /// Global floor `q0` applied to every threshold.
    pub global_floor: f64,
    pub band_mode: BandMode,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            window_size: 5,
            band_halfwidth: 0.01,
            global_floor: 0.01,
            band_mode: BandMode::TwoSided,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(DenoiseError::BadConfig(format!(
                "window_size {} must be odd and at least 3",
                self.window_size
            )));
        }
        for (name, v) in [
            ("band_halfwidth", self.band_halfwidth),
            ("global_floor", self.global_floor),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DenoiseError::BadConfig(format!(
                    "{name} {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel adaptive thresholds, never below the global floor.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

/// Gradient magnitude where kept, zero where suppressed.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseMask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

macro_rules! grid_accessors {
    ($ty:ty) => {
        impl $ty {
            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn value(&self, x: usize, y: usize) -> f64 {
                self.values[y * self.width + x]
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            /// Gray view with values clamped to `[0, 1]`, for export.
            pub fn to_gray_image(&self) -> Image {
                let data = self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                Image::new(self.width, self.height, 1, data).expect("clamped grid")
            }
        }
    };
}

grid_accessors!(ThresholdMap);
grid_accessors!(DenoiseMask);

/// Window mean of gradient magnitudes (replicate padding, stride 1),
/// floored at `global_floor`.
pub fn adaptive_threshold(grad: &GradientMap, cfg: &DenoiseConfig) -> Result<ThresholdMap> {
    cfg.validate()?;
    let (w, h) = (grad.width(), grad.height());
    let limit = 2 * w.min(h);
    if cfg.window_size > limit {
        return Err(DenoiseError::WindowTooLarge {
            window: cfg.window_size,
            limit,
        });
    }
    let half = (cfg.window_size / 2) as isize;
    let area = (cfg.window_size * cfg.window_size) as f64;
    let (wi, hi) = (w as isize, h as isize);
    let mut values = Vec::with_capacity(w * h);
    for y in 0..hi {
        for x in 0..wi {
            let mut sum = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let sx = (x + dx).clamp(0, wi - 1) as usize;
                    let sy = (y + dy).clamp(0, hi - 1) as usize;
                    sum += grad.value(sx, sy).abs();
                }
            }
            values.push((sum / area).max(cfg.global_floor));
        }
    }
    Ok(ThresholdMap {
        width: w,
        height: h,
        values,
    })
}

/// Applies the band rule pixelwise: gradients inside the suppression
/// band become 0, everything else keeps its gradient value.
pub fn compute_mask(
    grad: &GradientMap,
    qmap: &ThresholdMap,
    cfg: &DenoiseConfig,
) -> Result<DenoiseMask> {
    cfg.validate()?;
    if grad.width() != qmap.width || grad.height() != qmap.height {
        return Err(DenoiseError::ShapeMismatch {
            what: "gradient vs threshold map",
            aw: grad.width(),
            ah: grad.height(),
            bw: qmap.width,
            bh: qmap.height,
        });
    }
    let mu = cfg.band_halfwidth;
    let values = grad
        .values()
        .iter()
        .zip(&qmap.values)
        .map(|(&g, &q)| {
            let keep = match cfg.band_mode {
                BandMode::TwoSided => !(g > q - mu && g < q + mu),
                BandMode::HighPass => g > q + mu,
            };
            if keep {
                g
            } else {
                0.0
            }
        })
        .collect();
    Ok(DenoiseMask {
        width: grad.width(),
        height: grad.height(),
        values,
    })
}

/// Retains exactly the events whose pixel has a nonzero mask value.
/// Order and labels are untouched.
pub fn apply_mask(stream: &EventStream, mask: &DenoiseMask) -> Result<EventStream> {
    if stream.width() != mask.width || stream.height() != mask.height {
        return Err(DenoiseError::ShapeMismatch {
            what: "stream vs mask",
            aw: stream.width(),
            ah: stream.height(),
            bw: mask.width,
            bh: mask.height,
        });
    }
    Ok(stream.filter(|e| mask.value(e.x as usize, e.y as usize) != 0.0))
}

/// Polarity targets for denoiser training: filter the stream by the
/// mask, then take the majority polarity per pixel over `[t0, t1)`.
pub fn pseudo_labels(
    stream: &EventStream,
    mask: &DenoiseMask,
    t0: u64,
    t1: u64,
) -> Result<PolarityMap> {
    let kept = apply_mask(stream, mask)?;
    let counts = rasterize_counts(&kept, t0, t1)?;
    Ok(to_polarity_map(&counts))
}
