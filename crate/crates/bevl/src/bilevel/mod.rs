//! Losses and the task-aware bilevel training loop: one-step truncated
//! hypergradients with finite-difference Hessian-vector products, plus
//! joint and alternating baselines.
//!
//! The denoiser parameters `w` form the upper level, the enhancer
//! parameters `theta` the lower level. One iteration probes a
//! single lower step `theta' = theta - eta * grad_theta(psi)`,
//! differentiates the upper loss at `(w, theta')`, and corrects with a
//! mixed second-derivative term estimated by symmetric finite
//! differences.

mod hypergrad;
mod loss;
mod train;

pub use hypergrad::{fd_hvp, hypergradient, HypergradReport, HypergradStep};
pub use loss::{den_loss, enh_loss};
pub use train::{
    alternating_train, bilevel_train, joint_train, load_checkpoint, log_csv, save_checkpoint,
    LogRow, OptimizerKind, TrainConfig, TrainState,
};

use thiserror::Error;

use crate::net::NetError;
use crate::tensor::{ParamSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BilevelError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(
        "lower loss diverged: psi {psi} at iteration {iter} exceeded 10x its initial value {initial} for 50 consecutive iterations"
    )]
    Diverged { iter: usize, psi: f64, initial: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BilevelError>;

/// A bilevel problem instance: both losses as differentiable graphs
/// over already-attached parameter sets.
///
/// `psi` is the lower-level (enhancement) objective, `phi` the
/// upper-level objective (denoising plus enhancement), and `den_only`
/// the denoiser loss alone, used by the alternating baseline's first
/// phase. Implementations must be deterministic: the training loop
/// evaluates `psi` several times per iteration (probe step and two
/// finite-difference points) and relies on each call seeing the same
/// batch. Batch rotation, if any, happens only in [`BilevelObjectives::advance`].
pub trait BilevelObjectives {
    /// Called once at the start of each training iteration; rotate
    /// mini-batches here (seeded), or leave the default full-batch
    /// no-op.
    fn advance(&mut self, _iter: usize) {}

    /// Lower-level loss as an attached scalar.
    fn psi(&self, w: &ParamSet, theta: &ParamSet) -> Result<Tensor>;

    /// Upper-level loss as an attached scalar.
    fn phi(&self, w: &ParamSet, theta: &ParamSet) -> Result<Tensor>;

    /// Denoiser-only loss as an attached scalar.
    fn den_only(&self, w: &ParamSet) -> Result<Tensor>;
}
