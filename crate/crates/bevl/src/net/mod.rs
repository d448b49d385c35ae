//! The learned networks: an event denoiser and a dual-branch low-light
//! enhancer whose reflectance branch fuses event features through
//! channel attention.
//!
//! All three nets share a 3-level encoder-decoder skeleton at widths
//! `C, 2C, 4C` with average-pool downsampling, nearest-neighbor
//! upsampling and skip connections. Spatial inputs must be divisible
//! by 4. Parameters live in a [`ParamSet`] under stable dotted names,
//! so checkpoints and gradient maps line up across runs.

mod eiab;

pub use eiab::{eiab_attention, eiab_forward, init_eiab};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{concat, ParamSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad input: expected {want}, got shape {got:?}")]
    Input { want: String, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Negative slope of the hidden-layer activations.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Architecture width knob shared by all nets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Channels at the top level; deeper levels use 2x and 4x.
    pub base_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { base_channels: 8 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(NetError::BadConfig("base_channels must be positive".to_string()));
        }
        Ok(())
    }
}

/// Uniform init in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
fn init_weight(rng: &mut ChaCha12Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("finite init")
}

fn init_conv(
    ps: &mut ParamSet,
    rng: &mut ChaCha12Rng,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    bias: bool,
) -> Result<()> {
    ps.insert(
        format!("{name}.w"),
        init_weight(rng, vec![co, ci, k, k], ci * k * k),
    )?;
    if bias {
        ps.insert(format!("{name}.b"), Tensor::zeros(vec![co])?)?;
    }
    Ok(())
}

fn init_depthwise(
    ps: &mut ParamSet,
    rng: &mut ChaCha12Rng,
    name: &str,
    c: usize,
    k: usize,
) -> Result<()> {
    ps.insert(format!("{name}.w"), init_weight(rng, vec![c, k, k], k * k))?;
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![c])?)?;
    Ok(())
}

/// Convolution with the parameter pair `<name>.w` / `<name>.b`.
fn conv(ps: &ParamSet, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = ps.require(&format!("{name}.w"))?;
    let b = ps.get(&format!("{name}.b"));
    Ok(x.conv2d(w, b)?)
}

fn act(x: Tensor) -> Result<Tensor> {
    Ok(x.leaky_relu(LEAKY_SLOPE)?)
}

/// Checks a `(channels, H, W)` input with both sides divisible by 4.
fn check_input(t: &Tensor, channels: usize, role: &str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if let [c, h, w] = shape {
        if *c == channels && *h % 4 == 0 && *w % 4 == 0 && *h >= 4 && *w >= 4 {
            return Ok((*h, *w));
        }
    }
    Err(NetError::Input {
        want: format!("{role}: ({channels}, H, W) with H, W multiples of 4"),
        got: shape.to_vec(),
    })
}

/// Registers the six conv layers of one encoder-decoder under `prefix`.
fn init_encdec(
    ps: &mut ParamSet,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    c: usize,
) -> Result<()> {
    init_conv(ps, rng, &format!("{prefix}.enc1"), c, in_ch, 3, true)?;
    init_conv(ps, rng, &format!("{prefix}.enc2"), 2 * c, c, 3, true)?;
    init_conv(ps, rng, &format!("{prefix}.bott"), 4 * c, 2 * c, 3, true)?;
    init_conv(ps, rng, &format!("{prefix}.dec2"), 2 * c, 4 * c + 2 * c, 3, true)?;
    init_conv(ps, rng, &format!("{prefix}.dec1"), c, 2 * c + c, 3, true)?;
    init_conv(ps, rng, &format!("{prefix}.out"), out_ch, c, 3, true)?;
    Ok(())
}

/// Plain encoder-decoder forward (no fusion), returning raw output
/// logits before any output nonlinearity.
fn encdec_forward(ps: &ParamSet, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let e1 = act(conv(ps, &format!("{prefix}.enc1"), x)?)?;
    let e2 = act(conv(ps, &format!("{prefix}.enc2"), &e1.avgpool2()?)?)?;
    let bo = act(conv(ps, &format!("{prefix}.bott"), &e2.avgpool2()?)?)?;
    let d2 = act(conv(
        ps,
        &format!("{prefix}.dec2"),
        &concat(&[&bo.upsample_nearest2()?, &e2], 0)?,
    )?)?;
    let d1 = act(conv(
        ps,
        &format!("{prefix}.dec1"),
        &concat(&[&d2.upsample_nearest2()?, &e1], 0)?,
    )?)?;
    conv(ps, &format!("{prefix}.out"), &d1)
}

/// Event denoiser: 2-channel count map in, 3-class per-pixel logits out
/// (positive, negative, no-event).
#[derive(Debug, Clone, Copy)]
pub struct DenoiserNet {
    cfg: NetConfig,
}

impl DenoiserNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> NetConfig {
        self.cfg
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        self.init_into(&mut ps, &mut rng)?;
        Ok(ps)
    }

    fn init_into(&self, ps: &mut ParamSet, rng: &mut ChaCha12Rng) -> Result<()> {
        init_encdec(ps, rng, "den", 2, 3, self.cfg.base_channels)
    }

    pub fn forward(&self, ps: &ParamSet, counts: &Tensor) -> Result<Tensor> {
        check_input(counts, 2, "count map")?;
        encdec_forward(ps, "den", counts)
    }
}

/// Illumination branch: 1 channel in, sigmoid 1 channel out.
#[derive(Debug, Clone, Copy)]
pub struct IllumNet {
    cfg: NetConfig,
}

impl IllumNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        self.init_into(&mut ps, &mut rng)?;
        Ok(ps)
    }

    fn init_into(&self, ps: &mut ParamSet, rng: &mut ChaCha12Rng) -> Result<()> {
        init_encdec(ps, rng, "illum", 1, 1, self.cfg.base_channels)
    }

    pub fn forward(&self, ps: &ParamSet, x_l: &Tensor) -> Result<Tensor> {
        check_input(x_l, 1, "illumination")?;
        Ok(encdec_forward(ps, "illum", x_l)?.sigmoid()?)
    }
}

/// Reflectance branch: 3-channel image plus 3-channel event
/// probabilities; event features are injected through one attention
/// block per level, from the bottleneck upward.
#[derive(Debug, Clone, Copy)]
pub struct ReflNet {
    cfg: NetConfig,
}

impl ReflNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        self.init_into(&mut ps, &mut rng)?;
        Ok(ps)
    }

    fn init_into(&self, ps: &mut ParamSet, rng: &mut ChaCha12Rng) -> Result<()> {
        let c = self.cfg.base_channels;
        init_encdec(ps, rng, "refl", 3, 3, c)?;
        init_conv(ps, rng, "refl.ev1", c, 3, 3, true)?;
        init_conv(ps, rng, "refl.ev2", 2 * c, c, 3, true)?;
        init_conv(ps, rng, "refl.ev3", 4 * c, 2 * c, 3, true)?;
        eiab::init_eiab(ps, rng, "refl.eiab3", 4 * c)?;
        eiab::init_eiab(ps, rng, "refl.eiab2", 2 * c)?;
        eiab::init_eiab(ps, rng, "refl.eiab1", c)?;
        Ok(())
    }

    pub fn forward(&self, ps: &ParamSet, x_r: &Tensor, events: &Tensor) -> Result<Tensor> {
        let (h, w) = check_input(x_r, 3, "reflectance")?;
        let (eh, ew) = check_input(events, 3, "event probabilities")?;
        if (h, w) != (eh, ew) {
            return Err(NetError::Input {
                want: format!("event probabilities: (3, {h}, {w})"),
                got: events.shape().to_vec(),
            });
        }
        let e1 = act(conv(ps, "refl.enc1", x_r)?)?;
        let e2 = act(conv(ps, "refl.enc2", &e1.avgpool2()?)?)?;
        let bo = act(conv(ps, "refl.bott", &e2.avgpool2()?)?)?;
        let v1 = act(conv(ps, "refl.ev1", events)?)?;
        let v2 = act(conv(ps, "refl.ev2", &v1.avgpool2()?)?)?;
        let v3 = act(conv(ps, "refl.ev3", &v2.avgpool2()?)?)?;
        let bo = eiab_forward(ps, "refl.eiab3", &bo, &v3)?;
        let d2 = act(conv(
            ps,
            "refl.dec2",
            &concat(&[&bo.upsample_nearest2()?, &e2], 0)?,
        )?)?;
        let d2 = eiab_forward(ps, "refl.eiab2", &d2, &v2)?;
        let d1 = act(conv(
            ps,
            "refl.dec1",
            &concat(&[&d2.upsample_nearest2()?, &e1], 0)?,
        )?)?;
        let d1 = eiab_forward(ps, "refl.eiab1", &d1, &v1)?;
        Ok(conv(ps, "refl.out", &d1)?.sigmoid()?)
    }
}

/// Both enhancer branches under one parameter set.
#[derive(Debug, Clone, Copy)]
pub struct EnhancerNet {
    illum: IllumNet,
    refl: ReflNet,
}

/// Outputs of one enhancement pass.
#[derive(Debug, Clone)]
pub struct EnhanceOut {
    /// Predicted illumination, `(1, H, W)` in `(0, 1)`.
    pub illum: Tensor,
    /// Predicted reflectance, `(3, H, W)` in `(0, 1)`.
    pub refl: Tensor,
    /// Recombined enhanced image, reflectance times broadcast
    /// illumination.
    pub high: Tensor,
}

impl EnhancerNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        Ok(Self {
            illum: IllumNet::new(cfg)?,
            refl: ReflNet::new(cfg)?,
        })
    }

    pub fn config(&self) -> NetConfig {
        self.illum.cfg
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        self.illum.init_into(&mut ps, &mut rng)?;
        self.refl.init_into(&mut ps, &mut rng)?;
        Ok(ps)
    }

    /// Runs both branches and recombines: `high = refl * illum` with
    /// the illumination channel broadcast.
    pub fn enhance(
        &self,
        ps: &ParamSet,
        x_l: &Tensor,
        x_r: &Tensor,
        events: &Tensor,
    ) -> Result<EnhanceOut> {
        let illum = self.illum.forward(ps, x_l)?;
        let refl = self.refl.forward(ps, x_r, events)?;
        let broadcast = concat(&[&illum, &illum, &illum], 0)?;
        let high = refl.mul(&broadcast)?;
        Ok(EnhanceOut { illum, refl, high })
    }
}
