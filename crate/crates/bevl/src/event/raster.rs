//! Dense per-pixel views of an event stream: polarity-split count maps,
//! dominant-polarity maps, and accumulated log-intensity increments.

use crate::tensor::Tensor;

use super::{EventError, EventStream, Result};

/// Per-pixel event counts over a time window, split by polarity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventCountMap {
    width: usize,
    height: usize,
    pos: Vec<u32>,
    neg: Vec<u32>,
}

impl EventCountMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pos(&self, x: usize, y: usize) -> u32 {
        self.pos[y * self.width + x]
    }

    pub fn neg(&self, x: usize, y: usize) -> u32 {
        self.neg[y * self.width + x]
    }

    /// Total number of counted events.
    pub fn total(&self) -> u64 {
        self.pos.iter().map(|&c| c as u64).sum::<u64>()
            + self.neg.iter().map(|&c| c as u64).sum::<u64>()
    }

    /// Converts to a `(2, H, W)` tensor, channel 0 positive and channel 1
    /// negative, with counts clipped at 255 and scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> crate::tensor::Result<Tensor> {
        let scale = |c: &u32| (*c).min(255) as f64 / 255.0;
        let mut data: Vec<f64> = Vec::with_capacity(2 * self.width * self.height);
        data.extend(self.pos.iter().map(scale));
        data.extend(self.neg.iter().map(scale));
        Tensor::new(vec![2, self.height, self.width], data)
    }
}

/// Counts events with `t0 <= t < t1` into a polarity-split grid.
pub fn rasterize_counts(stream: &EventStream, t0: u64, t1: u64) -> Result<EventCountMap> {
    if t0 >= t1 {
        return Err(EventError::EmptyWindow { t0, t1 });
    }
    let (width, height) = (stream.width(), stream.height());
    let mut pos = vec![0u32; width * height];
    let mut neg = vec![0u32; width * height];
    for e in stream.events() {
        if e.t < t0 || e.t >= t1 {
            continue;
        }
        let idx = e.y as usize * width + e.x as usize;
        if e.polarity > 0 {
            pos[idx] = pos[idx].saturating_add(1);
        } else {
            neg[idx] = neg[idx].saturating_add(1);
        }
    }
    Ok(EventCountMap {
        width,
        height,
        pos,
        neg,
    })
}

/// Which polarity, if any, dominates at a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolarityClass {
    Positive,
    Negative,
    NoEvent,
}

/// Per-pixel dominant polarity over a time window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolarityMap {
    width: usize,
    height: usize,
    classes: Vec<PolarityClass>,
}

impl PolarityMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn class(&self, x: usize, y: usize) -> PolarityClass {
        self.classes[y * self.width + x]
    }

    /// Converts to a `(3, H, W)` one-hot tensor with channel order
    /// positive, negative, no-event.
    pub fn to_onehot(&self) -> crate::tensor::Result<Tensor> {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for (i, c) in self.classes.iter().enumerate() {
            let ch = match c {
                PolarityClass::Positive => 0,
                PolarityClass::Negative => 1,
                PolarityClass::NoEvent => 2,
            };
            data[ch * n + i] = 1.0;
        }
        Tensor::new(vec![3, self.height, self.width], data)
    }
}

/// Classifies each pixel by majority count; exact nonzero ties count as
/// positive.
pub fn to_polarity_map(counts: &EventCountMap) -> PolarityMap {
    let classes = counts
        .pos
        .iter()
        .zip(&counts.neg)
        .map(|(&p, &n)| {
            if p == 0 && n == 0 {
                PolarityClass::NoEvent
            } else if p >= n {
                PolarityClass::Positive
            } else {
                PolarityClass::Negative
            }
        })
        .collect();
    PolarityMap {
        width: counts.width,
        height: counts.height,
        classes,
    }
}

/// Classifies each pixel by the polarity of its most recent event in
/// `[t0, t1)`. Same-timestamp collisions at a pixel resolve positive,
/// since canonical stream order places the positive event last.
pub fn polarity_map_from_stream(stream: &EventStream, t0: u64, t1: u64) -> Result<PolarityMap> {
    if t0 >= t1 {
        return Err(EventError::EmptyWindow { t0, t1 });
    }
    let (width, height) = (stream.width(), stream.height());
    let mut classes = vec![PolarityClass::NoEvent; width * height];
    for e in stream.events() {
        if e.t < t0 || e.t >= t1 {
            continue;
        }
        classes[e.y as usize * width + e.x as usize] = if e.polarity > 0 {
            PolarityClass::Positive
        } else {
            PolarityClass::Negative
        };
    }
    Ok(PolarityMap {
        width,
        height,
        classes,
    })
}

/// Accumulated log-intensity change per pixel reconstructed from events:
/// each event contributes one contrast step of its polarity.
#[derive(Debug, Clone, PartialEq)]
pub struct LogIntensityIncrement {
    width: usize,
    height: usize,
    t0: u64,
    t1: u64,
    values: Vec<f64>,
}

impl LogIntensityIncrement {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// The `[t0, t1)` accumulation window.
    pub fn window(&self) -> (u64, u64) {
        (self.t0, self.t1)
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Sums polarity-signed contrast steps over `[t - dt, t)`, saturating the
/// window start at zero.
pub fn log_increment(
    stream: &EventStream,
    t: u64,
    dt: u64,
    contrast: f64,
) -> Result<LogIntensityIncrement> {
    if !(contrast.is_finite() && contrast > 0.0) {
        return Err(EventError::BadContrast(contrast));
    }
    let t0 = t.saturating_sub(dt);
    if t0 >= t {
        return Err(EventError::EmptyWindow { t0, t1: t });
    }
    let counts = rasterize_counts(stream, t0, t)?;
    let values = counts
        .pos
        .iter()
        .zip(&counts.neg)
        .map(|(&p, &n)| contrast * (p as f64 - n as f64))
        .collect();
    Ok(LogIntensityIncrement {
        width: stream.width(),
        height: stream.height(),
        t0,
        t1: t,
        values,
    })
}
