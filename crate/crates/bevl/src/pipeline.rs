//! Glue between simulated scenes and the training machinery:
//! precomputed per-scene training items, the full-pipeline bilevel
//! objective, network-based stream denoising, and scene evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::bilevel::{den_loss, enh_loss, BilevelError, BilevelObjectives};
use crate::denoise::{adaptive_threshold, compute_mask, pseudo_labels, DenoiseConfig, DenoiseError};
use crate::event::{
    rasterize_counts, EventError, EventStream, Label, PolarityMap,
};
use crate::image::{Image, ImageError};
use crate::metrics::{event_prf, psnr, psnr_star, ssim, MetricError, MetricReport};
use crate::net::{DenoiserNet, EnhancerNet, NetConfig, NetError};
use crate::retinex::{decompose, gradient_magnitude, GradientKind, GradientMap};
use crate::sim::{mix_seed, SceneData};
use crate::sim::SceneSequence;
use crate::tensor::{ParamSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no scenes to build training items from")]
    Empty,
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Bilevel(#[from] Box<BilevelError>),
}

impl From<BilevelError> for PipelineError {
    fn from(e: BilevelError) -> Self {
        PipelineError::Bilevel(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Event accumulation window covering the whole sequence: half-open,
/// one tick past the last frame so events on the final transition are
/// included.
pub fn scene_window(scene: &SceneSequence) -> (u64, u64) {
    let ts = scene.timestamps_us();
    (ts[0], ts[ts.len() - 1] + 1)
}

/// Union of edge locations over the sequence: the pixelwise maximum,
/// across frames, of the ground-truth reflectance gradient magnitude.
/// Moving scenes trace their edges across the window this way, which
/// is what the event stream integrates over.
pub fn scene_gradient(scene: &SceneSequence) -> GradientMap {
    let (w, h) = {
        let f = &scene.frames()[0];
        (f.width(), f.height())
    };
    let mut acc = vec![0.0f64; w * h];
    for frame in scene.frames() {
        let refl = decompose(frame).reflectance;
        let g = gradient_magnitude(&refl, GradientKind::default());
        for (a, v) in acc.iter_mut().zip(g.values()) {
            *a = a.max(*v);
        }
    }
    GradientMap::from_values(w, h, acc).expect("geometry from a valid scene")
}

/// Everything one scene contributes to training, precomputed as
/// detached tensors.
#[derive(Clone)]
pub struct TrainItem {
    /// Denoiser input: scaled event counts, `(2, H, W)`.
    pub counts: Tensor,
    /// Denoiser target from the gradient-guided filter.
    pub pseudo: PolarityMap,
    /// Enhancer inputs: decomposition of the degraded frame.
    pub low_illum: Tensor,
    pub low_refl: Tensor,
    /// Reconstruction target `(3, H, W)`.
    pub high: Tensor,
    /// Branch targets: decomposition of the ground-truth frame.
    pub target_illum: Tensor,
    pub target_refl: Tensor,
}

/// Builds the training item for one scene: events rasterized over the
/// full window, pseudo-labels from the ground-truth reflectance
/// gradients, and the last frame's degraded/clean decomposition pair.
pub fn train_item(data: &SceneData, dcfg: &DenoiseConfig) -> Result<TrainItem> {
    let (t0, t1) = scene_window(&data.scene);
    let counts = rasterize_counts(&data.events, t0, t1)?;
    let grad = scene_gradient(&data.scene);
    let qmap = adaptive_threshold(&grad, dcfg)?;
    let mask = compute_mask(&grad, &qmap, dcfg)?;
    let pseudo = pseudo_labels(&data.events, &mask, t0, t1)?;

    let low = decompose(data.low_frames.last().expect("scene has frames"));
    let high_img = data.scene.frames().last().expect("scene has frames");
    let target = decompose(high_img);
    Ok(TrainItem {
        counts: counts.to_tensor()?,
        pseudo,
        low_illum: low.illumination.to_tensor()?,
        low_refl: low.reflectance.to_tensor()?,
        high: high_img.to_tensor()?,
        target_illum: target.illumination.to_tensor()?,
        target_refl: target.reflectance.to_tensor()?,
    })
}

pub fn dataset_items(scenes: &[SceneData], dcfg: &DenoiseConfig) -> Result<Vec<TrainItem>> {
    if scenes.is_empty() {
        return Err(PipelineError::Empty);
    }
    scenes.iter().map(|s| train_item(s, dcfg)).collect()
}

/// The full-pipeline training objective over a set of scenes.
///
/// Lower loss: enhancement error with the denoiser's soft class
/// probabilities flowing into the reflectance branch. Upper loss: the
/// denoiser's cross-entropy against pseudo-labels plus the same
/// enhancement term. Both are means over the active items.
pub struct PipelineObjective {
    denoiser: DenoiserNet,
    enhancer: EnhancerNet,
    items: Vec<TrainItem>,
    /// Weight on the enhancement term of the upper loss; exactly zero
    /// skips building that branch so no gradient path to the enhancer
    /// exists at all.
    enh_weight: f64,
    /// Mini-batch size and shuffle seed; full batch when absent.
    batch: Option<(usize, u64)>,
    /// Replaces the event tensor into the reflectance branch with
    /// zeros, disconnecting the denoiser from the lower loss.
    event_ablation: bool,
    active: Vec<usize>,
}

impl PipelineObjective {
    pub fn new(cfg: NetConfig, items: Vec<TrainItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(PipelineError::Empty);
        }
        let active = (0..items.len()).collect();
        Ok(Self {
            denoiser: DenoiserNet::new(cfg)?,
            enhancer: EnhancerNet::new(cfg)?,
            items,
            enh_weight: 1.0,
            batch: None,
            event_ablation: false,
            active,
        })
    }

    pub fn with_enh_weight(mut self, weight: f64) -> Self {
        self.enh_weight = weight;
        self
    }

    pub fn with_batching(mut self, batch_size: usize, seed: u64) -> Self {
        self.batch = Some((batch_size.max(1), seed));
        self
    }

    pub fn with_event_ablation(mut self) -> Self {
        self.event_ablation = true;
        self
    }

    pub fn denoiser(&self) -> &DenoiserNet {
        &self.denoiser
    }

    pub fn enhancer(&self) -> &EnhancerNet {
        &self.enhancer
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    /// Fresh parameter families derived from one seed.
    pub fn init_params(&self, seed: u64) -> Result<(ParamSet, ParamSet)> {
        let w = self.denoiser.init_params(mix_seed(seed, 1))?;
        let theta = self.enhancer.init_params(mix_seed(seed, 2))?;
        Ok((w, theta))
    }

    fn enh_term(
        &self,
        theta: &ParamSet,
        item: &TrainItem,
        probs: Tensor,
    ) -> crate::bilevel::Result<Tensor> {
        let out = self
            .enhancer
            .enhance(theta, &item.low_illum, &item.low_refl, &probs)?;
        enh_loss(
            &out.high,
            &out.illum,
            &out.refl,
            &item.high,
            &item.target_illum,
            &item.target_refl,
        )
    }

    /// Event tensor entering the reflectance branch: soft class
    /// probabilities, or constant zeros under ablation.
    fn event_tensor(&self, logits: &Tensor) -> crate::tensor::Result<Tensor> {
        if self.event_ablation {
            Tensor::zeros(logits.shape().to_vec())
        } else {
            logits.softmax(0)
        }
    }

    fn mean_over_active(
        &self,
        mut term: impl FnMut(&TrainItem) -> crate::bilevel::Result<Tensor>,
    ) -> crate::bilevel::Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for &i in &self.active {
            let t = term(&self.items[i])?;
            total = Some(match total {
                Some(acc) => acc.add(&t)?,
                None => t,
            });
        }
        let total = total.ok_or_else(|| {
            BilevelError::BadConfig("objective has no active items".to_string())
        })?;
        Ok(total.scale(1.0 / self.active.len() as f64)?)
    }
}

impl BilevelObjectives for PipelineObjective {
    fn advance(&mut self, iter: usize) {
        let Some((size, seed)) = self.batch else {
            return;
        };
        let n = self.items.len();
        if size >= n {
            self.active = (0..n).collect();
            return;
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, iter as u64));
        idx.shuffle(&mut rng);
        idx.truncate(size);
        idx.sort_unstable();
        self.active = idx;
    }

    fn psi(&self, w: &ParamSet, theta: &ParamSet) -> crate::bilevel::Result<Tensor> {
        self.mean_over_active(|item| {
            let logits = self.denoiser.forward(w, &item.counts)?;
            let probs = self.event_tensor(&logits)?;
            self.enh_term(theta, item, probs)
        })
    }

    fn phi(&self, w: &ParamSet, theta: &ParamSet) -> crate::bilevel::Result<Tensor> {
        self.mean_over_active(|item| {
            let logits = self.denoiser.forward(w, &item.counts)?;
            let den = den_loss(&logits, &item.pseudo)?;
            if self.enh_weight == 0.0 {
                return Ok(den);
            }
            let probs = self.event_tensor(&logits)?;
            let enh = self.enh_term(theta, item, probs)?;
            den.add(&enh.scale(self.enh_weight)?).map_err(Into::into)
        })
    }

    fn den_only(&self, w: &ParamSet) -> crate::bilevel::Result<Tensor> {
        self.mean_over_active(|item| {
            let logits = self.denoiser.forward(w, &item.counts)?;
            den_loss(&logits, &item.pseudo)
        })
    }
}

/// Filters a stream with the trained denoiser: rasterize, classify
/// every pixel, and keep an event only where the predicted class
/// (argmax over the three logits, first one winning ties) matches the
/// event's polarity.
pub fn net_denoise_stream(
    net: &DenoiserNet,
    w: &ParamSet,
    stream: &EventStream,
    t0: u64,
    t1: u64,
) -> Result<EventStream> {
    let counts = rasterize_counts(stream, t0, t1)?;
    let logits = net.forward(w, &counts.to_tensor()?)?;
    let n = stream.width() * stream.height();
    let data = logits.data();
    Ok(stream.filter(|e| {
        let i = e.y as usize * stream.width() + e.x as usize;
        let pixel = [data[i], data[n + i], data[2 * n + i]];
        let mut arg = 0;
        for c in 1..3 {
            if pixel[c] > pixel[arg] {
                arg = c;
            }
        }
        let want = if e.polarity > 0 { 0 } else { 1 };
        arg == want
    }))
}

/// Everything `cmd_eval` reports for one scene.
pub struct SceneEval {
    pub enhanced: Image,
    pub denoised: EventStream,
    pub report: MetricReport,
}

/// Runs the trained pair on one scene: network-denoised events, the
/// enhanced image from the last degraded frame, and the metric row
/// comparing against ground truth.
pub fn evaluate_scene(
    denoiser: &DenoiserNet,
    enhancer: &EnhancerNet,
    w: &ParamSet,
    theta: &ParamSet,
    data: &SceneData,
) -> Result<SceneEval> {
    let (t0, t1) = scene_window(&data.scene);
    let counts = rasterize_counts(&data.events, t0, t1)?;
    let logits = denoiser.forward(w, &counts.to_tensor()?)?;
    let probs = logits.softmax(0)?;
    let low = decompose(data.low_frames.last().expect("scene has frames"));
    let out = enhancer.enhance(
        theta,
        &low.illumination.to_tensor()?,
        &low.reflectance.to_tensor()?,
        &probs,
    )?;
    let enhanced = Image::from_tensor(&out.high)?;
    let denoised = net_denoise_stream(denoiser, w, &data.events, t0, t1)?;

    let reference = data.scene.frames().last().expect("scene has frames");
    let star = psnr_star(&enhanced, reference)?;
    let prf = event_prf(&denoised, &data.events)?;
    Ok(SceneEval {
        report: MetricReport {
            psnr: psnr(&enhanced, reference)?,
            psnr_star: star.db,
            ssim: ssim(&enhanced, reference)?,
            event_precision: prf.precision,
            event_recall: prf.recall,
            event_f1: prf.f1,
        },
        enhanced,
        denoised,
    })
}

/// Baseline F1 of keeping every event: precision is the signal
/// fraction, recall is 1.
pub fn unfiltered_prf(stream: &EventStream) -> Result<crate::metrics::PrfResult> {
    Ok(event_prf(stream, stream)?)
}

/// Signal fraction of a labeled stream.
pub fn signal_fraction(stream: &EventStream) -> f64 {
    if stream.is_empty() {
        return 0.0;
    }
    stream.with_label(Label::Signal).len() as f64 / stream.len() as f64
}
