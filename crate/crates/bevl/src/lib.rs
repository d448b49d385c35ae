//! Event-guided low-light image enhancement testbed.
//!
//! The crate is organised as a pipeline of small, independently testable
//! pieces:
//!
//! * [`tensor`]: a dense f64 tensor type with reverse-mode automatic
//!   differentiation over a fixed primitive set, plus parameter containers,
//!   optimizers, and a finite-difference gradient oracle.
//! * [`event`]: event records, streams, count/polarity rasterisation, and the
//!   `evtxt` text format.
//! * [`sim`]: a frame-difference event simulator with background-activity
//!   noise, low-light frame degradation, and synthetic scene generation.
//! * [`retinex`]: fixed (non-learned) reflectance/illumination decomposition
//!   and image-gradient maps.
//! * [`denoise`]: the spatially adaptive, gradient-guided event filter used to
//!   build pseudo-labels.
//! * [`net`]: small encoder-decoder networks for event denoising and
//!   enhancement, fused by a channel cross-attention block.
//! * [`bilevel`]: training loops (bilevel with one-step lookahead and a
//!   finite-difference Hessian-vector correction, joint, alternating).
//! * [`metrics`]: PSNR, scale-invariant PSNR, SSIM, and event
//!   precision/recall/F1.
//! * [`pipeline`], [`config`], [`cli`]: glue from datasets on disk to training
//!   items, run configuration, and the command-line entry points.

pub mod bilevel;
pub mod cli;
pub mod config;
pub mod denoise;
pub mod event;
pub mod image;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod retinex;
pub mod sim;
pub mod tensor;
