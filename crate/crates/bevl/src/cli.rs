//! Subcommand implementations behind the `bevl` binary: a shared
//! on-disk run layout, per-command manifests echoing the resolved
//! configuration, and deterministic artifact bytes so identical runs
//! rewrite identical files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilevel::{
    alternating_train, bilevel_train, joint_train, load_checkpoint, log_csv, save_checkpoint,
    BilevelError, TrainState,
};
use crate::config::{ConfigError, RunConfig, Strategy};
use crate::denoise::{adaptive_threshold, apply_mask, compute_mask, DenoiseError};
use crate::event::{save_events, EventError, EventStream};
use crate::image::{save_pnm, BitDepth, Image, ImageError};
use crate::metrics::{event_prf, MetricError};
use crate::net::{DenoiserNet, EnhancerNet, NetError};
use crate::pipeline::{
    evaluate_scene, scene_gradient, train_item, PipelineError, PipelineObjective,
};
use crate::sim::{load_dataset, make_dataset, mix_seed, save_dataset, SceneData, SimError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing {what} at {path}; run `bevl {hint}` first")]
    Missing {
        what: &'static str,
        path: PathBuf,
        hint: &'static str,
    },
    #[error("{what} does not match the current configuration\n-- stored --\n{stored}\n-- current --\n{current}")]
    Mismatch {
        what: &'static str,
        stored: String,
        current: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Bilevel(#[from] Box<BilevelError>),
}

impl From<BilevelError> for CliError {
    fn from(e: BilevelError) -> Self {
        CliError::Bilevel(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// What a subcommand produced: its directory, the relative artifact
/// paths it wrote, and any warnings for the caller to surface.
#[derive(Debug)]
pub struct CmdOutcome {
    pub dir: PathBuf,
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}

pub fn denoise_dir(out: &Path) -> PathBuf {
    out.join("denoise")
}

pub fn train_dir(out: &Path, strategy: Strategy) -> PathBuf {
    out.join("train").join(strategy.name())
}

pub fn eval_dir(out: &Path, strategy: Strategy) -> PathBuf {
    out.join("eval").join(strategy.name())
}

/// Echo of the resolved configuration plus the files a command wrote,
/// stored next to those files.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    artifacts: Vec<String>,
}

const MANIFEST_NAME: &str = "manifest.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_manifest(dir: &Path, cfg: &RunConfig, mut artifacts: Vec<String>) -> Result<Vec<String>> {
    artifacts.sort();
    artifacts.dedup();
    // The echoed config omits its own location, so a run can be moved
    // or reproduced under another root and still compare equal.
    let mut config = cfg.clone();
    config.out_dir = None;
    let manifest = Manifest {
        config,
        artifacts: artifacts.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_text(&dir.join(MANIFEST_NAME), &text)?;
    artifacts.push(MANIFEST_NAME.to_string());
    Ok(artifacts)
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// Fields that describe where a run lives or how far it has gotten,
/// as opposed to what it computes; cleared before config comparisons.
fn comparable(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.out_dir = None;
    c.train.hyper.stop_after = None;
    c
}

/// Relative paths of every file under `dir` except the manifest,
/// sorted for stable manifests.
fn list_files_rel(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<String>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(io_err(dir))?;
        for entry in entries {
            let entry = entry.map_err(io_err(dir))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, acc)?;
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("walk stays under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel != MANIFEST_NAME {
                    acc.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut acc = Vec::new();
    walk(dir, dir, &mut acc)?;
    acc.sort();
    Ok(acc)
}

/// Maps scenes to per-scene results, in order, optionally on a pool of
/// `parallel` threads. Scene work is independent and seeded, so both
/// paths produce identical results.
fn par_map<T, U, F>(parallel: usize, items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    if parallel <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| CliError::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        items
            .par_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect()
    })
}

fn scene_name(index: usize) -> String {
    format!("scene_{index:03}")
}

/// Loads the dataset under `out` and checks it was generated by the
/// same dataset block the current config resolves to.
fn load_matching_dataset(cfg: &RunConfig) -> Result<Vec<SceneData>> {
    let dir = dataset_dir(cfg.out_dir()?);
    if !dir.join("dataset.json").exists() {
        return Err(CliError::Missing {
            what: "dataset",
            path: dir,
            hint: "simulate",
        });
    }
    let (params, scenes) = load_dataset(&dir)?;
    if params != cfg.dataset {
        return Err(CliError::Mismatch {
            what: "on-disk dataset",
            stored: serde_json::to_string_pretty(&params).expect("params serialize"),
            current: serde_json::to_string_pretty(&cfg.dataset).expect("params serialize"),
        });
    }
    Ok(scenes)
}

/// Generates the dataset and persists it with a manifest.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<CmdOutcome> {
    let out = cfg.out_dir()?;
    let dir = dataset_dir(out);
    let scenes = make_dataset(&cfg.dataset)?;
    save_dataset(&dir, &cfg.dataset, &scenes)?;
    let artifacts = write_manifest(&dir, cfg, list_files_rel(&dir)?)?;
    Ok(CmdOutcome {
        dir,
        artifacts,
        warnings: Vec::new(),
    })
}

struct DenoiseSceneOut {
    artifacts: Vec<String>,
    prf_row: Option<String>,
    warning: Option<String>,
}

/// Runs the gradient-guided filter over every scene: filtered stream,
/// keep-mask image, and a precision-recall row per labeled scene.
pub fn cmd_denoise(cfg: &RunConfig, parallel: usize) -> Result<CmdOutcome> {
    let out = cfg.out_dir()?;
    let scenes = load_matching_dataset(cfg)?;
    let dir = denoise_dir(out);
    ensure_dir(&dir)?;

    let per_scene = par_map(parallel, &scenes, |i, data| {
        let name = scene_name(i);
        let grad = scene_gradient(&data.scene);
        let qmap = adaptive_threshold(&grad, &cfg.denoise)?;
        let mask = compute_mask(&grad, &qmap, &cfg.denoise)?;
        let filtered = apply_mask(&data.events, &mask)?;

        let stream_rel = format!("{name}.events.txt");
        save_events(&filtered, dir.join(&stream_rel))?;
        let mask_rel = format!("{name}.mask.pgm");
        let mask_img = Image::new(mask.width(), mask.height(), 1, mask.values().to_vec())?;
        save_pnm(&mask_img, dir.join(&mask_rel), BitDepth::Eight)?;

        let (prf_row, warning) = if data.events.fully_labeled() {
            let prf = event_prf(&filtered, &data.events)?;
            let row = format!(
                "{name},{},{},{},{},{},{},{}\n",
                prf.precision,
                prf.recall,
                prf.f1,
                prf.kept,
                prf.kept_signal,
                prf.total_signal,
                prf.degenerate
            );
            let warning = prf
                .degenerate
                .then(|| format!("{name}: empty filter output or labels, metrics degenerate"));
            (Some(row), warning)
        } else {
            (
                None,
                Some(format!(
                    "{name}: events not fully labeled, precision-recall row skipped"
                )),
            )
        };
        Ok(DenoiseSceneOut {
            artifacts: vec![stream_rel, mask_rel],
            prf_row,
            warning,
        })
    })?;

    let mut artifacts = Vec::new();
    let mut warnings = Vec::new();
    let mut csv = String::from(
        "scene,precision,recall,f1,kept,kept_signal,total_signal,degenerate\n",
    );
    for scene_out in per_scene {
        artifacts.extend(scene_out.artifacts);
        if let Some(row) = scene_out.prf_row {
            csv.push_str(&row);
        }
        warnings.extend(scene_out.warning);
    }
    write_text(&dir.join("prf.csv"), &csv)?;
    artifacts.push("prf.csv".to_string());
    let artifacts = write_manifest(&dir, cfg, artifacts)?;
    Ok(CmdOutcome {
        dir,
        artifacts,
        warnings,
    })
}

/// Trains with the configured strategy, appending to a previous
/// checkpoint of the same run when one is present. The log keeps one
/// row per completed iteration, so a finished run reruns to identical
/// bytes.
pub fn cmd_train(cfg: &RunConfig, parallel: usize) -> Result<CmdOutcome> {
    let out = cfg.out_dir()?;
    let strategy = cfg.train.strategy;
    let scenes = load_matching_dataset(cfg)?;
    let dir = train_dir(out, strategy);
    ensure_dir(&dir)?;

    let items = par_map(parallel, &scenes, |_, data| {
        Ok(train_item(data, &cfg.denoise)?)
    })?;
    let mut objective =
        PipelineObjective::new(cfg.net, items)?.with_enh_weight(cfg.train.enh_weight);
    if let Some(batch) = cfg.train.batch_size {
        objective = objective.with_batching(batch, mix_seed(cfg.seed, 3));
    }

    let ckpt_path = dir.join("checkpoint.bin");
    let log_path = dir.join("log.csv");
    let (mut state, prior_log) = if ckpt_path.exists() {
        let stored = read_manifest(&dir)?;
        if comparable(&stored.config) != comparable(cfg) {
            return Err(CliError::Mismatch {
                what: "existing training run",
                stored: stored.config.to_json(),
                current: cfg.to_json(),
            });
        }
        let state = load_checkpoint(&ckpt_path)?;
        if state.iter > cfg.train.hyper.end_iter() {
            return Err(CliError::Invalid(format!(
                "checkpoint at iteration {} is past the configured stop at {}",
                state.iter,
                cfg.train.hyper.end_iter()
            )));
        }
        let prior = fs::read_to_string(&log_path).map_err(io_err(&log_path))?;
        (state, Some(prior))
    } else {
        let (w, theta) = objective.init_params(cfg.seed)?;
        (TrainState::new(w, theta), None)
    };

    let hyper = &cfg.train.hyper;
    let rows = match strategy {
        Strategy::Bilevel => bilevel_train(&mut objective, hyper, &mut state),
        Strategy::Joint => joint_train(&mut objective, hyper, &mut state),
        Strategy::Alternating => alternating_train(&mut objective, hyper, &mut state),
    }
    .map_err(Box::new)?;

    let fresh = log_csv(&rows, strategy == Strategy::Bilevel);
    let full = match prior_log {
        // Fresh rows carry no header when appended after a prior log.
        Some(prior) => {
            let body = fresh.split_once('\n').map(|(_, b)| b).unwrap_or("");
            prior + body
        }
        None => fresh,
    };
    write_text(&log_path, &full)?;
    save_checkpoint(&ckpt_path, &state).map_err(Box::new)?;
    let artifacts = write_manifest(
        &dir,
        cfg,
        vec!["checkpoint.bin".to_string(), "log.csv".to_string()],
    )?;
    Ok(CmdOutcome {
        dir,
        artifacts,
        warnings: Vec::new(),
    })
}

/// Side-by-side composition, left to right.
fn hstack(images: &[&Image]) -> Result<Image> {
    let first = images.first().expect("at least one image");
    let (h, c) = (first.height(), first.channels());
    let total_w: usize = images.iter().map(|im| im.width()).sum();
    let mut data = Vec::with_capacity(total_w * h * c);
    for y in 0..h {
        for im in images {
            if im.height() != h || im.channels() != c {
                return Err(CliError::Invalid(
                    "panels of one composition must share geometry".to_string(),
                ));
            }
            for x in 0..im.width() {
                for ch in 0..c {
                    data.push(im.get(x, y, ch));
                }
            }
        }
    }
    Ok(Image::new(total_w, h, c, data)?)
}

/// Events on mid-gray: positive-majority pixels red, negative-majority
/// blue, exact ties magenta.
fn event_viz(stream: &EventStream) -> Result<Image> {
    let (w, h) = (stream.width(), stream.height());
    let mut pos = vec![0u32; w * h];
    let mut neg = vec![0u32; w * h];
    for e in stream.events() {
        let i = e.y as usize * w + e.x as usize;
        if e.polarity > 0 {
            pos[i] += 1;
        } else {
            neg[i] += 1;
        }
    }
    let mut data = vec![0.5; w * h * 3];
    for i in 0..w * h {
        let rgb = match pos[i].cmp(&neg[i]) {
            std::cmp::Ordering::Greater => [1.0, 0.0, 0.0],
            std::cmp::Ordering::Less if neg[i] > 0 => [0.0, 0.0, 1.0],
            std::cmp::Ordering::Equal if pos[i] > 0 => [1.0, 0.0, 1.0],
            _ => continue,
        };
        data[i * 3..i * 3 + 3].copy_from_slice(&rgb);
    }
    Ok(Image::new(w, h, 3, data)?)
}

struct EvalSceneOut {
    artifacts: Vec<String>,
    csv_row: String,
}

/// Evaluates a trained checkpoint on every scene: metric rows, triptych
/// images (degraded, enhanced, reference), and denoised-event
/// visualizations.
pub fn cmd_eval(cfg: &RunConfig, parallel: usize) -> Result<CmdOutcome> {
    let out = cfg.out_dir()?;
    let strategy = cfg.train.strategy;
    let scenes = load_matching_dataset(cfg)?;

    let tdir = train_dir(out, strategy);
    let ckpt_path = tdir.join("checkpoint.bin");
    if !ckpt_path.exists() {
        return Err(CliError::Missing {
            what: "checkpoint",
            path: ckpt_path,
            hint: "train",
        });
    }
    let stored = read_manifest(&tdir)?;
    if stored.config.net != cfg.net {
        return Err(CliError::Mismatch {
            what: "checkpoint architecture",
            stored: stored.config.to_json(),
            current: cfg.to_json(),
        });
    }
    let state = load_checkpoint(&ckpt_path).map_err(Box::new)?;
    let denoiser = DenoiserNet::new(cfg.net)?;
    let enhancer = EnhancerNet::new(cfg.net)?;

    let dir = eval_dir(out, strategy);
    ensure_dir(&dir)?;
    let per_scene = par_map(parallel, &scenes, |i, data| {
        let name = scene_name(i);
        let eval = evaluate_scene(&denoiser, &enhancer, &state.w, &state.theta, data)?;
        let low = data.low_frames.last().expect("scene has frames");
        let reference = data.scene.frames().last().expect("scene has frames");

        let trip_rel = format!("{name}.triptych.ppm");
        save_pnm(
            &hstack(&[low, &eval.enhanced, reference])?,
            dir.join(&trip_rel),
            BitDepth::Eight,
        )?;
        let viz_rel = format!("{name}.events.ppm");
        save_pnm(&event_viz(&eval.denoised)?, dir.join(&viz_rel), BitDepth::Eight)?;

        let r = &eval.report;
        let csv_row = format!(
            "{name},{},{},{},{},{},{}\n",
            r.psnr, r.psnr_star, r.ssim, r.event_precision, r.event_recall, r.event_f1
        );
        Ok(EvalSceneOut {
            artifacts: vec![trip_rel, viz_rel],
            csv_row,
        })
    })?;

    let mut artifacts = Vec::new();
    let mut csv =
        String::from("scene,psnr,psnr_star,ssim,event_precision,event_recall,event_f1\n");
    for scene_out in per_scene {
        artifacts.extend(scene_out.artifacts);
        csv.push_str(&scene_out.csv_row);
    }
    write_text(&dir.join("metrics.csv"), &csv)?;
    artifacts.push("metrics.csv".to_string());
    let artifacts = write_manifest(&dir, cfg, artifacts)?;
    Ok(CmdOutcome {
        dir,
        artifacts,
        warnings: Vec::new(),
    })
}
