//! One JSON document drives every subcommand. Unknown keys are
//! rejected, missing keys take defaults, and each run writes the
//! fully-resolved configuration it actually used next to its outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilevel::TrainConfig;
use crate::denoise::DenoiseConfig;
use crate::net::NetConfig;
use crate::sim::DatasetParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Which training loop `cmd_train` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Bilevel,
    Joint,
    Alternating,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Bilevel, Strategy::Joint, Strategy::Alternating];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Bilevel => "bilevel",
            Strategy::Joint => "joint",
            Strategy::Alternating => "alternating",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilevel" => Ok(Strategy::Bilevel),
            "joint" => Ok(Strategy::Joint),
            "alternating" => Ok(Strategy::Alternating),
            other => Err(ConfigError::Invalid(format!(
                "unknown strategy {other:?}; expected bilevel, joint, or alternating"
            ))),
        }
    }
}

/// Training block: the strategy choice plus everything the objective
/// and the optimizer loop need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub strategy: Strategy,
    /// Scenes per iteration; absent means full batch.
    pub batch_size: Option<usize>,
    /// Weight of the enhancement term inside the upper loss.
    pub enh_weight: f64,
    pub hyper: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::default(),
            batch_size: None,
            enh_weight: 1.0,
            hyper: TrainConfig::default(),
        }
    }
}

/// The whole run: dataset generation, denoising rule, network width,
/// and training schedule, all hanging off one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random choice in a run derives from it.
    pub seed: u64,
    /// Output root; the `--out` flag overrides it.
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetParams,
    pub denoise: DenoiseConfig,
    pub net: NetConfig,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            dataset: DatasetParams::default(),
            denoise: DenoiseConfig::default(),
            net: NetConfig::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    /// Canonical serialized form; stable bytes for identical configs.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|source| ConfigError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Applies command-line overrides, pushes the master seed down into
    /// the simulator block, and validates. The result is what gets
    /// echoed into manifests.
    pub fn resolve(mut self, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<Self> {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(dir) = out_dir {
            self.out_dir = Some(dir);
        }
        self.dataset.sim.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let checks = [
            (d.n_scenes >= 1, "dataset.n_scenes must be at least 1"),
            (d.n_frames >= 2, "dataset.n_frames must be at least 2"),
            (
                d.width >= 8 && d.height >= 8,
                "dataset frames must be at least 8x8",
            ),
            (
                d.width % 4 == 0 && d.height % 4 == 0,
                "dataset frame sides must be divisible by 4 for the two-level networks",
            ),
            (
                self.train.enh_weight.is_finite() && self.train.enh_weight >= 0.0,
                "train.enh_weight must be finite and nonnegative",
            ),
            (
                self.train.batch_size != Some(0),
                "train.batch_size must be at least 1 when given",
            ),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(ConfigError::Invalid(what.to_string()));
            }
        }
        self.denoise
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .hyper
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Output root, present after `resolve` was given one from either
    /// source.
    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir.as_deref().ok_or_else(|| {
            ConfigError::Invalid("no output directory; set out_dir or pass --out".to_string())
        })
    }
}
