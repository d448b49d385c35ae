//! Parametric moving scenes rendered to frame sequences.
//!
//! Patterns are defined as continuous periodic functions of scene
//! coordinates; motion translates the pattern and each pixel is 2x2
//! supersampled, so edges alias into gradual one-pixel ramps the way a
//! real sensor's pixel aperture would.

use serde::{Deserialize, Serialize};

use crate::image::Image;

use super::{Result, SimError};

/// Built-in scene families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePattern {
    /// Translating two-tone checkerboard.
    Checkerboard,
    /// Shaded squares on a gray background.
    Squares,
    /// Horizontal sawtooth intensity ramp.
    Ramp,
    /// Two-level square wave: a pair of vertical edges sweeping the
    /// frame.
    MovingEdge,
}

/// Everything needed to render one scene deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub pattern: ScenePattern,
    pub width: usize,
    pub height: usize,
    /// Number of frames, at least 2.
    pub n_frames: usize,
    /// Microseconds between consecutive frames.
    pub frame_interval_us: u64,
    /// Pattern translation in pixels per second.
    pub velocity: (f64, f64),
    /// Initial pattern offset in pixels.
    pub phase: f64,
}

/// Rendered frames with their timestamps and motion descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    frames: Vec<Image>,
    timestamps_us: Vec<u64>,
    pattern: ScenePattern,
    velocity: (f64, f64),
}

impl SceneSequence {
    pub fn new(
        frames: Vec<Image>,
        timestamps_us: Vec<u64>,
        pattern: ScenePattern,
        velocity: (f64, f64),
    ) -> Result<Self> {
        if frames.len() < 2 {
            return Err(SimError::BadScene(format!(
                "{} frames (need at least 2)",
                frames.len()
            )));
        }
        if timestamps_us.len() != frames.len() {
            return Err(SimError::BadScene(format!(
                "{} timestamps for {} frames",
                timestamps_us.len(),
                frames.len()
            )));
        }
        if !timestamps_us.windows(2).all(|w| w[0] < w[1]) {
            return Err(SimError::BadScene(
                "timestamps must be strictly increasing".to_string(),
            ));
        }
        let first = &frames[0];
        for f in &frames[1..] {
            if f.width() != first.width()
                || f.height() != first.height()
                || f.channels() != first.channels()
            {
                return Err(SimError::BadScene("frames disagree on geometry".to_string()));
            }
        }
        if !(velocity.0.is_finite() && velocity.1.is_finite()) {
            return Err(SimError::BadScene("velocity must be finite".to_string()));
        }
        Ok(Self {
            frames,
            timestamps_us,
            pattern,
            velocity,
        })
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn timestamps_us(&self) -> &[u64] {
        &self.timestamps_us
    }

    pub fn pattern(&self) -> ScenePattern {
        self.pattern
    }

    pub fn velocity(&self) -> (f64, f64) {
        self.velocity
    }
}

/// Pattern color at scene coordinates `(u, v)`, both already wrapped
/// into `[0, w) x [0, h)`.
fn shade(pattern: ScenePattern, u: f64, v: f64, w: f64, h: f64) -> [f64; 3] {
    match pattern {
        ScenePattern::Checkerboard => {
            let cell = (w.min(h) / 4.0).max(2.0);
            let parity = ((u / cell).floor() + (v / cell).floor()).rem_euclid(2.0);
            if parity < 1.0 {
                [0.8, 0.75, 0.7]
            } else {
                [0.2, 0.25, 0.3]
            }
        }
        ScenePattern::Squares => {
            // Fixed layout: (center fraction, half-side fraction, color).
            let squares: [(f64, f64, f64, [f64; 3]); 3] = [
                (0.28, 0.30, 0.14, [0.85, 0.55, 0.35]),
                (0.72, 0.32, 0.11, [0.35, 0.75, 0.55]),
                (0.45, 0.74, 0.16, [0.45, 0.55, 0.9]),
            ];
            let mut out = [0.35, 0.35, 0.35];
            for (cx, cy, half, color) in squares {
                let (cx, cy, half) = (cx * w, cy * h, half * w.min(h));
                let (du, dv) = (u - cx, v - cy);
                if du.abs() <= half && dv.abs() <= half {
                    // Diagonal shading so squares carry interior gradients.
                    let s = 0.6 + 0.4 * ((du + dv) / (4.0 * half) + 0.5);
                    out = [color[0] * s, color[1] * s, color[2] * s];
                }
            }
            out
        }
        ScenePattern::Ramp => {
            let s = (u / w).rem_euclid(1.0);
            let base = 0.2 + 0.6 * s;
            [base, base * 0.95, base * 0.9]
        }
        ScenePattern::MovingEdge => {
            if u < w / 2.0 {
                [0.9, 0.85, 0.8]
            } else {
                [0.18, 0.2, 0.24]
            }
        }
    }
}

/// Renders the spec's frames at timestamps `0, dt, 2 dt, ...`.
pub fn render_scene(spec: &SceneSpec) -> Result<SceneSequence> {
    if spec.width == 0 || spec.height == 0 {
        return Err(SimError::BadScene("empty geometry".to_string()));
    }
    if spec.n_frames < 2 {
        return Err(SimError::BadScene("need at least 2 frames".to_string()));
    }
    if spec.frame_interval_us == 0 {
        return Err(SimError::BadScene("frame interval must be positive".to_string()));
    }
    if !(spec.phase.is_finite() && spec.velocity.0.is_finite() && spec.velocity.1.is_finite()) {
        return Err(SimError::BadScene("phase and velocity must be finite".to_string()));
    }
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut timestamps = Vec::with_capacity(spec.n_frames);
    for k in 0..spec.n_frames {
        let t_us = k as u64 * spec.frame_interval_us;
        let t_s = t_us as f64 / 1e6;
        let (ox, oy) = (
            spec.velocity.0 * t_s + spec.phase,
            spec.velocity.1 * t_s,
        );
        let mut data = Vec::with_capacity(spec.width * spec.height * 3);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let mut px = [0.0; 3];
                for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    let u = (x as f64 + sx - ox).rem_euclid(w);
                    let v = (y as f64 + sy - oy).rem_euclid(h);
                    let c = shade(spec.pattern, u, v, w, h);
                    for (acc, s) in px.iter_mut().zip(c) {
                        *acc += s;
                    }
                }
                data.extend(px.iter().map(|s| (s / 4.0).clamp(0.0, 1.0)));
            }
        }
        frames.push(Image::new(spec.width, spec.height, 3, data)?);
        timestamps.push(t_us);
    }
    SceneSequence::new(frames, timestamps, spec.pattern, spec.velocity)
}
