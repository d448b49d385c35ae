//! Classical reflectance/illumination decomposition and reflectance
//! gradients.
//!
//! Illumination is estimated as a box-blurred per-pixel channel maximum,
//! floored away from zero; reflectance is the quotient. The gradient
//! magnitude of reflectance luminance drives the event denoiser's
//! spatially adaptive thresholds.

use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error)]
pub enum RetinexError {
    #[error("reflectance {rw}x{rh} and illumination {iw}x{ih} do not match")]
    Mismatch {
        rw: usize,
        rh: usize,
        iw: usize,
        ih: usize,
    },
    #[error("illumination must be single-channel, got {0}")]
    NotGray(usize),
}

pub type Result<T> = std::result::Result<T, RetinexError>;

/// Lower bound on estimated illumination; keeps the quotient finite on
/// black pixels.
pub const DELTA_FLOOR: f64 = 1e-3;

/// Blur radius used by [`decompose`] (a 7x7 window).
pub const BLUR_RADIUS: usize = 3;

/// An image split into intrinsic appearance and lighting.
#[derive(Debug, Clone, PartialEq)]
pub struct RetinexPair {
    /// Per-channel reflectance in `[0, 1]`.
    pub reflectance: Image,
    /// Single-channel illumination in `[DELTA_FLOOR, 1]`.
    pub illumination: Image,
}

/// Mean over a centered `(2r+1)` square window with replicate padding.
pub fn box_blur(gray: &Image, radius: usize) -> Image {
    let (w, h) = (gray.width() as isize, gray.height() as isize);
    let area = {
        let side = 2 * radius + 1;
        (side * side) as f64
    };
    let r = radius as isize;
    let mut data = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x + dx).clamp(0, w - 1) as usize;
                    let sy = (y + dy).clamp(0, h - 1) as usize;
                    sum += gray.get(sx, sy, 0);
                }
            }
            data.push((sum / area).clamp(0.0, 1.0));
        }
    }
    Image::new(gray.width(), gray.height(), 1, data).expect("blur of unit-range samples")
}

/// Splits an image into an illumination estimate (blurred channel
/// maximum, floored at [`DELTA_FLOOR`]) and the clipped quotient
/// reflectance.
pub fn decompose(image: &Image) -> RetinexPair {
    let blurred = box_blur(&image.channel_max(), BLUR_RADIUS);
    let illum: Vec<f64> = blurred.data().iter().map(|&v| v.max(DELTA_FLOOR)).collect();
    let channels = image.channels();
    let mut refl = Vec::with_capacity(image.data().len());
    for (i, px) in image.data().chunks_exact(channels).enumerate() {
        for &v in px {
            refl.push((v / illum[i]).clamp(0.0, 1.0));
        }
    }
    RetinexPair {
        reflectance: Image::new(image.width(), image.height(), channels, refl)
            .expect("clipped quotient"),
        illumination: Image::new(image.width(), image.height(), 1, illum)
            .expect("floored blur"),
    }
}

/// Elementwise product, illumination broadcast over channels.
pub fn recompose(pair: &RetinexPair) -> Result<Image> {
    let (r, l) = (&pair.reflectance, &pair.illumination);
    if l.channels() != 1 {
        return Err(RetinexError::NotGray(l.channels()));
    }
    if r.width() != l.width() || r.height() != l.height() {
        return Err(RetinexError::Mismatch {
            rw: r.width(),
            rh: r.height(),
            iw: l.width(),
            ih: l.height(),
        });
    }
    let channels = r.channels();
    let data = r
        .data()
        .chunks_exact(channels)
        .zip(l.data())
        .flat_map(|(px, &lv)| px.iter().map(move |&rv| rv * lv))
        .collect();
    Ok(Image::new(r.width(), r.height(), channels, data).expect("product of unit ranges"))
}

/// Gradient operator choice for [`gradient_magnitude`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientKind {
    /// One-sided differences; the replicate boundary zeroes the last
    /// column (x) and row (y).
    #[default]
    Forward,
    /// 3x3 Sobel with replicate padding.
    Sobel,
}

/// Non-negative per-pixel gradient magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl GradientMap {
    /// Wraps precomputed magnitudes; negative entries are clamped to 0.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Option<Self> {
        if values.len() != width * height {
            return None;
        }
        let values = values.iter().map(|v| v.max(0.0)).collect();
        Some(Self {
            width,
            height,
            values,
        })
    }

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
}

/// Gradient magnitude of the image's luminance.
pub fn gradient_magnitude(image: &Image, kind: GradientKind) -> GradientMap {
    let lum = image.luminance();
    let (w, h) = (lum.width(), lum.height());
    let at = |x: isize, y: isize| {
        lum.get(
            x.clamp(0, w as isize - 1) as usize,
            y.clamp(0, h as isize - 1) as usize,
            0,
        )
    };
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (gx, gy) = match kind {
                GradientKind::Forward => (at(x + 1, y) - at(x, y), at(x, y + 1) - at(x, y)),
                GradientKind::Sobel => {
                    let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                        - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
                    let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                        - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
                    (gx, gy)
                }
            };
            values.push((gx * gx + gy * gy).sqrt());
        }
    }
    GradientMap { width: w, height: h, values }
}
