//! Synthetic paired data: scene sequences, the event trigger model,
//! background-activity noise, and low-light frame degradation.
//!
//! Everything is seeded and deterministic, so datasets regenerate
//! bit-identically and statistical claims can be tested across many
//! seeds.

mod dataset;
mod scene;

pub use dataset::{load_dataset, make_dataset, save_dataset, DatasetParams, SceneData};
pub use scene::{render_scene, ScenePattern, SceneSequence, SceneSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Event, EventError, EventStream, Label};
use crate::image::{Image, ImageError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad scene: {0}")]
    BadScene(String),
    #[error("bad dataset: {0}")]
    BadDataset(String),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Sensor and degradation model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Log-intensity step that triggers one event.
    pub contrast_threshold: f64,
    /// Additive floor inside the log, keeping log(0) unreachable.
    pub log_floor: f64,
    /// Background-activity rate, noise events per pixel per second.
    pub ba_rate: f64,
    /// Low-light intensity gain in `(0, 1]`.
    pub lowlight_gain: f64,
    /// Signal-dependent (shot) noise scale.
    pub shot_noise: f64,
    /// Signal-independent (read) noise sigma.
    pub read_noise: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.15,
            log_floor: 1e-3,
            ba_rate: 1.0,
            lowlight_gain: 0.1,
            shot_noise: 0.01,
            read_noise: 0.01,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool); 6] = [
            (
                "contrast_threshold must be finite and positive",
                self.contrast_threshold.is_finite() && self.contrast_threshold > 0.0,
            ),
            (
                "log_floor must be finite and positive",
                self.log_floor.is_finite() && self.log_floor > 0.0,
            ),
            (
                "ba_rate must be finite and non-negative",
                self.ba_rate.is_finite() && self.ba_rate >= 0.0,
            ),
            (
                "lowlight_gain must be in (0, 1]",
                self.lowlight_gain.is_finite()
                    && self.lowlight_gain > 0.0
                    && self.lowlight_gain <= 1.0,
            ),
            (
                "shot_noise must be finite and non-negative",
                self.shot_noise.is_finite() && self.shot_noise >= 0.0,
            ),
            (
                "read_noise must be finite and non-negative",
                self.read_noise.is_finite() && self.read_noise >= 0.0,
            ),
        ];
        for (what, ok) in checks {
            if !ok {
                return Err(SimError::BadConfig(what.to_string()));
            }
        }
        Ok(())
    }

    /// Derives an independent seed for sub-task `index`, so parallel
    /// scene generation stays reproducible.
    pub fn derive_seed(&self, index: u64) -> u64 {
        mix_seed(self.seed, index)
    }
}

/// Folds a sub-task index into a base seed.
pub(crate) fn mix_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// One round of the splitmix64 mixer.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Runs the trigger model over a scene: per pixel, a reference
/// log-luminance advances in whole contrast steps whenever the frame
/// luminance drifts a full step away, emitting one signal-labeled event
/// per step with timestamps interpolated inside the frame interval.
pub fn simulate_events(scene: &SceneSequence, cfg: &SimConfig) -> Result<EventStream> {
    cfg.validate()?;
    let eps = cfg.contrast_threshold;
    let b = cfg.log_floor;
    let (w, h) = (scene.width(), scene.height());
    let lum: Vec<Image> = scene.frames().iter().map(Image::luminance).collect();
    let ts = scene.timestamps_us();
    let mut l_ref: Vec<f64> = lum[0].data().iter().map(|&p| (p + b).ln()).collect();
    let mut events = Vec::new();
    for i in 0..lum.len() - 1 {
        let t0 = ts[i];
        let dt = (ts[i + 1] - ts[i]) as f64;
        for (pix, &p_new) in lum[i + 1].data().iter().enumerate() {
            let delta = (p_new + b).ln() - l_ref[pix];
            if delta.abs() < eps {
                continue;
            }
            let n = (delta.abs() / eps).floor() as u64;
            let polarity = if delta > 0.0 { 1 } else { -1 };
            let (x, y) = ((pix % w) as u16, (pix / w) as u16);
            for j in 1..=n {
                let frac = j as f64 * eps / delta.abs();
                events.push(Event {
                    t: t0 + (dt * frac).round() as u64,
                    x,
                    y,
                    polarity,
                    label: Some(Label::Signal),
                });
            }
            l_ref[pix] += n as f64 * eps * delta.signum();
        }
    }
    Ok(EventStream::new(w, h, events)?)
}

/// Adds uniformly distributed background-activity events over the
/// stream's full time window, labeled noise. The count is Poisson with
/// mean `ba_rate * W * H * T_seconds`; per-event draw order is
/// timestamp, x, y, polarity. Empty streams and zero rates pass
/// through unchanged.
pub fn inject_ba_noise(stream: &EventStream, cfg: &SimConfig) -> Result<EventStream> {
    cfg.validate()?;
    let Some((t0, t1)) = stream.full_window() else {
        return Ok(stream.clone());
    };
    let seconds = (t1 - t0) as f64 / 1e6;
    let mean = cfg.ba_rate * (stream.width() * stream.height()) as f64 * seconds;
    if mean == 0.0 {
        return Ok(stream.clone());
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let poisson =
        Poisson::new(mean).map_err(|e| SimError::BadConfig(format!("noise mean {mean}: {e}")))?;
    let count = poisson.sample(&mut rng).round() as u64;
    let mut noise = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let t = rng.gen_range(t0..t1);
        let x = rng.gen_range(0..stream.width() as u32) as u16;
        let y = rng.gen_range(0..stream.height() as u32) as u16;
        let polarity = if rng.gen_bool(0.5) { 1 } else { -1 };
        noise.push(Event {
            t,
            x,
            y,
            polarity,
            label: Some(Label::Noise),
        });
    }
    let noise = EventStream::new(stream.width(), stream.height(), noise)?;
    Ok(stream.merge(&noise)?)
}

/// Simulates capture in the dark: gain, signal-dependent shot noise,
/// and additive read noise, clipped back to `[0, 1]`.
pub fn degrade_low_light(frame: &Image, cfg: &SimConfig, seed: u64) -> Result<Image> {
    cfg.validate()?;
    let g = cfg.lowlight_gain;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data = frame
        .data()
        .iter()
        .map(|&v| {
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            (g * v + (cfg.shot_noise * g * v).sqrt() * n1 + cfg.read_noise * n2).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Image::new(frame.width(), frame.height(), frame.channels(), data)?)
}
