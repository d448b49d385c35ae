//! Images in `[0, 1]` with a binary PGM/PPM codec.
//!
//! Pixel data is interleaved row-major. The codec reads and writes the
//! binary NetPBM formats `P5` (gray) and `P6` (RGB) at 8 or 16 bits per
//! sample; 16-bit samples are big-endian per the format. Written files
//! use a canonical header, so encode -> decode -> encode is
//! byte-identical.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("geometry {width}x{height} is empty or exceeds {max} per side")]
    BadGeometry {
        width: usize,
        height: usize,
        max: usize,
    },
    #[error("{channels} channels (expected 1 or 3)")]
    BadChannels { channels: usize },
    #[error("data length {got} does not match {want}")]
    DataLength { got: usize, want: usize },
    #[error("sample {index} is {value}, outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("decode error at byte {offset}: {what}")]
    Decode { offset: usize, what: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// Matches the event-geometry cap so frames and streams line up.
pub const MAX_SIDE: usize = crate::event::MAX_SIDE;

/// A gray or RGB image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
            return Err(ImageError::BadGeometry {
                width,
                height,
                max: MAX_SIDE,
            });
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::BadChannels { channels });
        }
        let want = width * height * channels;
        if data.len() != want {
            return Err(ImageError::DataLength {
                got: data.len(),
                want,
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
                return Err(ImageError::OutOfRange { index, value });
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Rec. 601 luma for RGB; gray images pass through unchanged.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Per-pixel maximum over channels, as a gray image.
    pub fn channel_max(&self) -> Image {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| p.iter().cloned().fold(0.0, f64::max))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Converts to a planar `(C, H, W)` tensor.
    pub fn to_tensor(&self) -> crate::tensor::Result<Tensor> {
        let n = self.width * self.height;
        let mut data = vec![0.0; self.channels * n];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * n + i] = v;
            }
        }
        Tensor::new(vec![self.channels, self.height, self.width], data)
    }

    /// Builds an image from a planar `(C, H, W)` tensor, clamping samples
    /// to `[0, 1]`. The tensor must be finite with 1 or 3 channels.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let [channels, height, width] = t.shape() else {
            return Err(ImageError::BadChannels { channels: 0 });
        };
        let (channels, height, width) = (*channels, *height, *width);
        if channels != 1 && channels != 3 {
            return Err(ImageError::BadChannels { channels });
        }
        let n = width * height;
        let src = t.data();
        let mut data = vec![0.0; channels * n];
        for i in 0..n {
            for c in 0..channels {
                data[i * channels + c] = src[c * n + i].clamp(0.0, 1.0);
            }
        }
        Image::new(width, height, channels, data)
    }
}

/// Sample precision for encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Encodes to binary P5 (gray) or P6 (RGB) with a canonical header.
pub fn encode_pnm(img: &Image, depth: BitDepth) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let maxval = depth.maxval();
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    for &v in img.data() {
        let q = (v * maxval as f64).round() as u32;
        match depth {
            BitDepth::Eight => out.push(q as u8),
            BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    out
}

/// Byte cursor over a PNM header; handles `#` comments between tokens.
struct PnmCursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> PnmCursor<'a> {
    fn err(&self, what: impl Into<String>) -> ImageError {
        ImageError::Decode {
            offset: self.off,
            what: what.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.off) {
            if b.is_ascii_whitespace() {
                self.off += 1;
            } else if b == b'#' {
                while let Some(&b) = self.bytes.get(self.off) {
                    self.off += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    /// Reads an unsigned decimal token of at most 10 digits.
    fn number(&mut self) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.off;
        while self
            .bytes
            .get(self.off)
            .is_some_and(|b| b.is_ascii_digit())
        {
            self.off += 1;
        }
        let token = &self.bytes[start..self.off];
        if token.is_empty() || token.len() > 10 {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(token)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("bad number"))
    }
}

/// Decodes binary P5/P6 at any maxval up to 65535. Rejects trailing
/// bytes, oversized geometry, and truncated sample data.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut cur = PnmCursor { bytes, off: 0 };
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(cur.err("not a binary PGM/PPM (magic P5 or P6)")),
    };
    cur.off = 2;
    let width = cur.number()? as usize;
    let height = cur.number()? as usize;
    let maxval = cur.number()?;
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(cur.err(format!("geometry {width}x{height} out of range")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(cur.err(format!("maxval {maxval} out of range")));
    }
    match cur.bytes.get(cur.off) {
        Some(b) if b.is_ascii_whitespace() => cur.off += 1,
        _ => return Err(cur.err("expected single whitespace before samples")),
    }
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let samples = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| cur.err("sample count overflow"))?;
    let body = &cur.bytes[cur.off..];
    let want = samples
        .checked_mul(bytes_per_sample)
        .ok_or_else(|| cur.err("sample count overflow"))?;
    if body.len() != want {
        return Err(cur.err(format!(
            "expected {want} sample bytes, got {}",
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(samples);
    if bytes_per_sample == 1 {
        for (i, &b) in body.iter().enumerate() {
            if b as u64 > maxval {
                cur.off += i;
                return Err(cur.err(format!("sample {b} exceeds maxval {maxval}")));
            }
            data.push(b as f64 / maxval as f64);
        }
    } else {
        for (i, pair) in body.chunks_exact(2).enumerate() {
            let v = u16::from_be_bytes([pair[0], pair[1]]);
            if v as u64 > maxval {
                cur.off += 2 * i;
                return Err(cur.err(format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 / maxval as f64);
        }
    }
    Image::new(width, height, channels, data)
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn save_pnm(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    std::fs::write(path, encode_pnm(img, depth))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(width: usize, height: usize, channels: usize) -> Image {
        let n = width * height * channels;
        let data = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        Image::new(width, height, channels, data).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_inputs() {
        assert!(Image::new(0, 4, 1, vec![]).is_err());
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0, 0.5, 1.0, f64::NAN]).is_err());
    }

    #[test]
    fn luminance_matches_weights() {
        let img = Image::new(1, 1, 3, vec![0.2, 0.4, 0.8]).unwrap();
        let l = img.luminance();
        let want = 0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.8;
        assert!((l.get(0, 0, 0) - want).abs() < 1e-15);
        assert_eq!(l.channels(), 1);
    }

    #[test]
    fn channel_max_picks_largest() {
        let img = Image::new(1, 2, 3, vec![0.2, 0.9, 0.1, 0.5, 0.4, 0.6]).unwrap();
        let m = img.channel_max();
        assert_eq!(m.get(0, 0, 0), 0.9);
        assert_eq!(m.get(0, 1, 0), 0.6);
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let img = ramp(5, 4, 3);
        let t = img.to_tensor().unwrap();
        assert_eq!(t.shape(), &[3, 4, 5]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn pnm_byte_round_trip_is_identity() {
        for depth in [BitDepth::Eight, BitDepth::Sixteen] {
            for channels in [1, 3] {
                let bytes = encode_pnm(&ramp(7, 3, channels), depth);
                let img = decode_pnm(&bytes).unwrap();
                assert_eq!(encode_pnm(&img, depth), bytes);
            }
        }
    }

    #[test]
    fn sixteen_bit_quantization_error_is_small() {
        let img = ramp(9, 5, 1);
        let back = decode_pnm(&encode_pnm(&img, BitDepth::Sixteen)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn decoder_accepts_comments_and_odd_whitespace() {
        let bytes = b"P5 # gray\n# more\n 2\t1 #w\n255\n\x00\xff";
        let img = decode_pnm(bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.get(1, 0, 0), 1.0);
    }

    #[test]
    fn decoder_rejects_malformed_input() {
        let good = encode_pnm(&ramp(3, 2, 1), BitDepth::Eight);
        assert!(decode_pnm(&good[..good.len() - 1]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode_pnm(&trailing).is_err());
        assert!(decode_pnm(b"P7\n1 1\n255\n\x00").is_err());
        assert!(decode_pnm(b"P5\n1 1\n0\n").is_err());
        assert!(decode_pnm(b"P5\n1 1\n70000\n\x00\x00").is_err());
        assert!(decode_pnm(b"P5\n99999999999 1\n255\n").is_err());
        let over = b"P5\n1 1\n100\n\xff";
        assert!(decode_pnm(over).is_err());
    }
}
