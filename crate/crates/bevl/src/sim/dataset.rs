//! Dataset assembly and its on-disk layout.
//!
//! A dataset is a list of scenes, each carrying clean frames, degraded
//! low-light frames, and a noisy labeled event stream. On disk:
//!
//! ```text
//! <dir>/dataset.json
//! <dir>/scenes/scene_000/manifest.json
//! <dir>/scenes/scene_000/high_000.ppm   (16-bit)
//! <dir>/scenes/scene_000/low_000.ppm
//! <dir>/scenes/scene_000/events.txt     (labeled evtxt)
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::event::{load_events, save_events, EventStream};
use crate::image::{load_pnm, save_pnm, BitDepth, Image};

use super::{
    degrade_low_light, inject_ba_noise, mix_seed, render_scene, simulate_events, Result,
    ScenePattern, SceneSequence, SceneSpec, SimConfig, SimError,
};

/// Generation parameters for a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub n_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub frame_interval_us: u64,
    /// Scene `i` uses `patterns[i % patterns.len()]`.
    pub patterns: Vec<ScenePattern>,
    /// Per-scene speed is drawn uniformly from this range, px/s.
    pub speed_range: (f64, f64),
    pub sim: SimConfig,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_scenes: 4,
            width: 32,
            height: 32,
            n_frames: 6,
            frame_interval_us: 20_000,
            patterns: vec![
                ScenePattern::Checkerboard,
                ScenePattern::Squares,
                ScenePattern::Ramp,
                ScenePattern::MovingEdge,
            ],
            speed_range: (20.0, 60.0),
            sim: SimConfig::default(),
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(SimError::BadDataset("empty geometry".to_string()));
        }
        if self.n_frames < 2 {
            return Err(SimError::BadDataset("need at least 2 frames".to_string()));
        }
        if self.frame_interval_us == 0 {
            return Err(SimError::BadDataset("frame interval must be positive".to_string()));
        }
        if self.patterns.is_empty() {
            return Err(SimError::BadDataset("no patterns".to_string()));
        }
        let (lo, hi) = self.speed_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(SimError::BadDataset(format!(
                "speed range ({lo}, {hi}) must satisfy 0 <= lo <= hi"
            )));
        }
        Ok(())
    }
}

/// One scene's worth of paired data.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    /// Clean well-lit frames with timestamps.
    pub scene: SceneSequence,
    /// Degraded counterparts, one per frame.
    pub low_frames: Vec<Image>,
    /// Noisy event stream; every event labeled signal or noise.
    pub events: EventStream,
}

fn generate_scene(index: usize, params: &DatasetParams) -> Result<SceneData> {
    let scene_seed = params.sim.derive_seed(index as u64);
    let mut rng = ChaCha12Rng::seed_from_u64(scene_seed);
    let (lo, hi) = params.speed_range;
    let speed = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let pattern = params.patterns[index % params.patterns.len()];
    // Patterns that vary only along x need horizontal motion to emit
    // events at all.
    let velocity = match pattern {
        ScenePattern::Ramp | ScenePattern::MovingEdge => {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (sign * speed, 0.0)
        }
        _ => {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            (speed * angle.cos(), speed * angle.sin())
        }
    };
    let phase = rng.gen_range(0.0..params.width as f64);
    let scene = render_scene(&SceneSpec {
        pattern,
        width: params.width,
        height: params.height,
        n_frames: params.n_frames,
        frame_interval_us: params.frame_interval_us,
        velocity,
        phase,
    })?;
    let clean = simulate_events(&scene, &params.sim)?;
    let noise_cfg = SimConfig {
        seed: mix_seed(scene_seed, 1),
        ..params.sim.clone()
    };
    let events = inject_ba_noise(&clean, &noise_cfg)?;
    let low_frames = scene
        .frames()
        .iter()
        .enumerate()
        .map(|(k, f)| degrade_low_light(f, &params.sim, mix_seed(scene_seed, 2 + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneData {
        scene,
        low_frames,
        events,
    })
}

/// Generates all scenes. Each scene depends only on its own derived
/// seed, so the (parallel) result is identical to a sequential run.
pub fn make_dataset(params: &DatasetParams) -> Result<Vec<SceneData>> {
    params.validate()?;
    (0..params.n_scenes)
        .into_par_iter()
        .map(|i| generate_scene(i, params))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneManifest {
    width: usize,
    height: usize,
    pattern: ScenePattern,
    velocity: (f64, f64),
    timestamps_us: Vec<u64>,
    sim: SimConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetIndex {
    n_scenes: usize,
    params: DatasetParams,
}

fn scene_dir(root: &Path, index: usize) -> std::path::PathBuf {
    root.join("scenes").join(format!("scene_{index:03}"))
}

pub fn save_dataset(
    dir: impl AsRef<Path>,
    params: &DatasetParams,
    scenes: &[SceneData],
) -> Result<()> {
    let root = dir.as_ref();
    std::fs::create_dir_all(root)?;
    let index = DatasetIndex {
        n_scenes: scenes.len(),
        params: params.clone(),
    };
    std::fs::write(
        root.join("dataset.json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    for (i, data) in scenes.iter().enumerate() {
        let dir = scene_dir(root, i);
        std::fs::create_dir_all(&dir)?;
        let manifest = SceneManifest {
            width: data.scene.width(),
            height: data.scene.height(),
            pattern: data.scene.pattern(),
            velocity: data.scene.velocity(),
            timestamps_us: data.scene.timestamps_us().to_vec(),
            sim: params.sim.clone(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        for (k, frame) in data.scene.frames().iter().enumerate() {
            save_pnm(frame, dir.join(format!("high_{k:03}.ppm")), BitDepth::Sixteen)?;
        }
        for (k, frame) in data.low_frames.iter().enumerate() {
            save_pnm(frame, dir.join(format!("low_{k:03}.ppm")), BitDepth::Sixteen)?;
        }
        save_events(&data.events, dir.join("events.txt"))?;
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetParams, Vec<SceneData>)> {
    let root = dir.as_ref();
    let index: DatasetIndex =
        serde_json::from_str(&std::fs::read_to_string(root.join("dataset.json"))?)?;
    let mut scenes = Vec::with_capacity(index.n_scenes);
    for i in 0..index.n_scenes {
        let dir = scene_dir(root, i);
        let manifest: SceneManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let n = manifest.timestamps_us.len();
        let mut high = Vec::with_capacity(n);
        let mut low = Vec::with_capacity(n);
        for k in 0..n {
            high.push(load_pnm(dir.join(format!("high_{k:03}.ppm")))?);
            low.push(load_pnm(dir.join(format!("low_{k:03}.ppm")))?);
        }
        let scene = SceneSequence::new(
            high,
            manifest.timestamps_us,
            manifest.pattern,
            manifest.velocity,
        )?;
        if scene.width() != manifest.width || scene.height() != manifest.height {
            return Err(SimError::BadDataset(format!(
                "scene {i}: frames are {}x{} but manifest says {}x{}",
                scene.width(),
                scene.height(),
                manifest.width,
                manifest.height
            )));
        }
        let events = load_events(dir.join("events.txt"))?;
        if events.width() != scene.width() || events.height() != scene.height() {
            return Err(SimError::BadDataset(format!(
                "scene {i}: event geometry does not match frames"
            )));
        }
        for (k, f) in low.iter().enumerate() {
            if f.width() != scene.width() || f.height() != scene.height() {
                return Err(SimError::BadDataset(format!(
                    "scene {i}: low frame {k} geometry mismatch"
                )));
            }
        }
        scenes.push(SceneData {
            scene,
            low_frames: low,
            events,
        });
    }
    Ok((index.params, scenes))
}
