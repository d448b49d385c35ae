//! Event records, streams, and rasterised views.
//!
//! An event is a polarity sign at a pixel and a microsecond timestamp,
//! optionally carrying a signal/noise label from the simulator. Streams are
//! kept sorted by `(t, y, x, polarity, label)` so that every consumer sees a
//! canonical order.

mod raster;
mod text;

pub use raster::{
    log_increment, polarity_map_from_stream, rasterize_counts, to_polarity_map, EventCountMap,
    LogIntensityIncrement, PolarityClass, PolarityMap,
};
pub use text::{load_events, parse_evtxt, save_events, write_evtxt};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("event {index}: coordinates ({x},{y}) outside {width}x{height}")]
    OutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: usize,
        height: usize,
    },
    #[error("event {index}: polarity {polarity} is not +1 or -1")]
    BadPolarity { index: usize, polarity: i8 },
    #[error("geometry {width}x{height} is empty or exceeds {max} per side")]
    BadGeometry {
        width: usize,
        height: usize,
        max: usize,
    },
    #[error("time window [{t0},{t1}) is empty")]
    EmptyWindow { t0: u64, t1: u64 },
    #[error("contrast threshold {0} is not finite and positive")]
    BadContrast(f64),
    #[error("line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error("stream mixes labeled and unlabeled events")]
    MixedLabels,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EventError>;

/// Coordinates fit in u16; geometry is capped accordingly.
pub const MAX_SIDE: usize = u16::MAX as usize + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Signal,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    /// Microseconds from an arbitrary origin.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// +1 or -1.
    pub polarity: i8,
    pub label: Option<Label>,
}

fn label_rank(l: Option<Label>) -> u8 {
    match l {
        Some(Label::Signal) => 0,
        Some(Label::Noise) => 1,
        None => 2,
    }
}

/// Total order used for canonical stream sorting.
fn event_key(e: &Event) -> (u64, u16, u16, i8, u8) {
    (e.t, e.y, e.x, e.polarity, label_rank(e.label))
}

/// A sorted event stream over a fixed geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    width: usize,
    height: usize,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates coordinates and polarities, sorts, and wraps the events.
    pub fn new(width: usize, height: usize, mut events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
            return Err(EventError::BadGeometry {
                width,
                height,
                max: MAX_SIDE,
            });
        }
        for (index, e) in events.iter().enumerate() {
            if (e.x as usize) >= width || (e.y as usize) >= height {
                return Err(EventError::OutOfBounds {
                    index,
                    x: e.x,
                    y: e.y,
                    width,
                    height,
                });
            }
            if e.polarity != 1 && e.polarity != -1 {
                return Err(EventError::BadPolarity {
                    index,
                    polarity: e.polarity,
                });
            }
        }
        events.sort_by_key(event_key);
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// First and last timestamps, `None` for an empty stream.
    pub fn time_span(&self) -> Option<(u64, u64)> {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => Some((a.t, b.t)),
            _ => None,
        }
    }

    /// Half-open window covering every event: `[first, last + 1)`.
    pub fn full_window(&self) -> Option<(u64, u64)> {
        self.time_span().map(|(a, b)| (a, b + 1))
    }

    /// Keeps events satisfying `keep`, preserving geometry and order.
    pub fn filter(&self, mut keep: impl FnMut(&Event) -> bool) -> EventStream {
        EventStream {
            width: self.width,
            height: self.height,
            events: self.events.iter().copied().filter(|e| keep(e)).collect(),
        }
    }

    /// True when every event carries a label.
    pub fn fully_labeled(&self) -> bool {
        self.events.iter().all(|e| e.label.is_some())
    }

    /// True when no event carries a label.
    pub fn unlabeled(&self) -> bool {
        self.events.iter().all(|e| e.label.is_none())
    }

    /// The sub-stream with the given label.
    pub fn with_label(&self, label: Label) -> EventStream {
        self.filter(|e| e.label == Some(label))
    }

    /// Merges two streams over the same geometry into one sorted stream.
    pub fn merge(&self, other: &EventStream) -> Result<EventStream> {
        if self.width != other.width || self.height != other.height {
            return Err(EventError::BadGeometry {
                width: other.width,
                height: other.height,
                max: self.width.max(self.height),
            });
        }
        let mut events = self.events.clone();
        events.extend_from_slice(&other.events);
        EventStream::new(self.width, self.height, events)
    }
}
