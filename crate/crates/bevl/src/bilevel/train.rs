//! Training strategies over a [`BilevelObjectives`] instance: bilevel
//! with one-step lookahead, joint single-loss descent, and a two-phase
//! alternating baseline. All three share the log schema, the optimizer
//! modes, and the checkpoint format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::hypergrad::{eval_with, hypergradient, FD_M_SCALE};
use super::{BilevelError, BilevelObjectives, Result};
use crate::tensor::{
    adam_step, grad_l2_norm, sgd_step, AdamConfig, AdamState, ParamSet, Tensor,
};

/// Abort threshold: the lower loss exceeding this multiple of its
/// starting value counts as a divergence strike.
const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive strikes before the bilevel loop aborts.
const DIVERGENCE_PATIENCE: usize = 50;
/// Absolute floor on the starting value in the divergence test, so a
/// run that begins at or near a zero loss is not aborted over
/// harmless small fluctuations.
const DIVERGENCE_FLOOR: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient steps with the configured fixed step sizes. This
    /// is the mode the gradient-correctness guarantees are stated for.
    Sgd,
    /// Adam on both parameter families with a cosine-annealed learning
    /// rate shared between them.
    AdamCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total iteration budget, including any already consumed by a
    /// resumed state.
    pub iterations: usize,
    /// Upper (denoiser) step size for plain gradient mode.
    pub eta_w: f64,
    /// Lower (enhancer) step size; also the lookahead step inside the
    /// hypergradient in every mode.
    pub eta_theta: f64,
    /// Relative probe length for the finite-difference correction.
    pub m_scale: f64,
    pub optimizer: OptimizerKind,
    /// Cosine schedule endpoints for [`OptimizerKind::AdamCosine`].
    pub adam_lr_max: f64,
    pub adam_lr_min: f64,
    /// Iterations the alternating strategy spends on its denoiser-only
    /// first phase; defaults to half the budget.
    pub phase1: Option<usize>,
    /// Pause the run once this many iterations are complete, leaving
    /// the rest of the budget for a later resume. The cosine schedule
    /// still spans the full budget, so a paused-and-resumed run walks
    /// the same learning rates as an uninterrupted one.
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            eta_w: 0.05,
            eta_theta: 0.05,
            m_scale: FD_M_SCALE,
            optimizer: OptimizerKind::Sgd,
            adam_lr_max: 2e-4,
            adam_lr_min: 1e-6,
            phase1: None,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.eta_w.is_finite() && self.eta_w > 0.0, "eta_w must be positive"),
            (
                self.eta_theta.is_finite() && self.eta_theta > 0.0,
                "eta_theta must be positive",
            ),
            (
                self.m_scale.is_finite() && self.m_scale > 0.0,
                "m_scale must be positive",
            ),
            (
                self.adam_lr_max.is_finite()
                    && self.adam_lr_min.is_finite()
                    && self.adam_lr_max >= self.adam_lr_min
                    && self.adam_lr_min > 0.0,
                "adam learning-rate range must be positive and ordered",
            ),
            (
                self.phase1.map_or(true, |p| p <= self.iterations),
                "phase1 cannot exceed the iteration budget",
            ),
            (
                self.stop_after.map_or(true, |s| s <= self.iterations),
                "stop_after cannot exceed the iteration budget",
            ),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(BilevelError::BadConfig(what.to_string()));
            }
        }
        Ok(())
    }

    fn phase1_iters(&self) -> usize {
        self.phase1.unwrap_or(self.iterations / 2)
    }

    pub fn end_iter(&self) -> usize {
        self.stop_after.unwrap_or(self.iterations)
    }

    /// Cosine anneal from `adam_lr_max` at iteration 0 toward
    /// `adam_lr_min` at the end of the budget.
    fn cosine_lr(&self, iter: usize) -> f64 {
        if self.iterations == 0 {
            return self.adam_lr_max;
        }
        let frac = iter as f64 / self.iterations as f64;
        self.adam_lr_min
            + 0.5 * (self.adam_lr_max - self.adam_lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Everything a training run mutates; saving and reloading this
/// mid-run reproduces the remaining iterations bit for bit.
#[derive(Clone)]
pub struct TrainState {
    pub w: ParamSet,
    pub theta: ParamSet,
    /// Iterations already completed.
    pub iter: usize,
    pub adam_w: AdamState,
    pub adam_theta: AdamState,
}

impl TrainState {
    pub fn new(w: ParamSet, theta: ParamSet) -> Self {
        Self {
            w,
            theta,
            iter: 0,
            adam_w: AdamState::new(AdamConfig::default()),
            adam_theta: AdamState::new(AdamConfig::default()),
        }
    }
}

/// One logged training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    /// Lower (enhancement) loss value.
    pub psi: f64,
    /// Upper (combined) loss value.
    pub phi: f64,
    pub grad_w_norm: f64,
    pub grad_theta_norm: f64,
    /// Finite-difference probe length; only the bilevel strategy
    /// produces it.
    pub fd_scale: Option<f64>,
}

/// Renders rows as CSV. The `fd_scale` column is present only when
/// requested, which callers tie to the bilevel strategy.
pub fn log_csv(rows: &[LogRow], include_fd_scale: bool) -> String {
    let mut out = String::from("iter,psi,phi,grad_w_norm,grad_theta_norm");
    if include_fd_scale {
        out.push_str(",fd_scale");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.iter, r.psi, r.phi, r.grad_w_norm, r.grad_theta_norm
        );
        if include_fd_scale {
            let _ = write!(out, ",{}", r.fd_scale.unwrap_or(0.0));
        }
        out.push('\n');
    }
    out
}

fn step_family(
    cfg: &TrainConfig,
    iter: usize,
    adam: &mut AdamState,
    params: &ParamSet,
    grads: &crate::tensor::GradMap,
    sgd_lr: f64,
) -> Result<ParamSet> {
    Ok(match cfg.optimizer {
        OptimizerKind::Sgd => sgd_step(params, grads, sgd_lr)?,
        OptimizerKind::AdamCosine => adam_step(adam, params, grads, cfg.cosine_lr(iter))?,
    })
}

/// Bilevel training: each iteration computes the one-step truncated
/// hypergradient, commits the probed lower update `theta'` as the new
/// lower parameters (in plain gradient mode the committed tensor is
/// the very probe, so the lookahead and the actual update share one
/// gradient), and steps the upper parameters along the hypergradient.
///
/// Aborts with [`BilevelError::Diverged`] when the lower loss stays
/// above ten times its starting value for fifty consecutive
/// iterations. Runs from `state.iter` to `cfg.iterations`; with a zero
/// remaining budget the state is returned untouched.
pub fn bilevel_train(
    obj: &mut impl BilevelObjectives,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut initial_psi = None;
    let mut strikes = 0usize;
    while state.iter < cfg.end_iter() {
        let k = state.iter;
        obj.advance(k);
        let step = hypergradient(obj, &state.w, &state.theta, cfg.eta_theta, cfg.m_scale)?;
        let baseline = *initial_psi.get_or_insert(step.psi);
        if step.psi > DIVERGENCE_FACTOR * baseline.max(DIVERGENCE_FLOOR) {
            strikes += 1;
        } else {
            strikes = 0;
        }
        if strikes >= DIVERGENCE_PATIENCE {
            return Err(BilevelError::Diverged {
                iter: k,
                psi: step.psi,
                initial: baseline,
            });
        }
        rows.push(LogRow {
            iter: k,
            psi: step.psi,
            phi: step.phi,
            grad_w_norm: grad_l2_norm(&step.hypergrad),
            grad_theta_norm: grad_l2_norm(&step.grad_theta_psi),
            fd_scale: Some(step.report.fd_scale),
        });
        state.theta = match cfg.optimizer {
            // Commit the probe itself: theta_{k+1} is the same object
            // the upper gradient was evaluated against.
            OptimizerKind::Sgd => step.theta_prime,
            OptimizerKind::AdamCosine => adam_step(
                &mut state.adam_theta,
                &state.theta,
                &step.grad_theta_psi,
                cfg.cosine_lr(k),
            )?,
        };
        state.w = step_family(
            cfg,
            k,
            &mut state.adam_w,
            &state.w,
            &step.hypergrad,
            cfg.eta_w,
        )?;
        state.iter += 1;
    }
    Ok(rows)
}

/// Joint baseline: descend the combined upper loss in both parameter
/// families simultaneously.
pub fn joint_train(
    obj: &mut impl BilevelObjectives,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    while state.iter < cfg.end_iter() {
        let k = state.iter;
        obj.advance(k);
        let psi = obj.psi(&state.w, &state.theta)?.item()?;
        let (phi, gw, gt) = eval_with(|wa, ta| obj.phi(wa, ta), &state.w, &state.theta)?;
        rows.push(LogRow {
            iter: k,
            psi,
            phi,
            grad_w_norm: grad_l2_norm(&gw),
            grad_theta_norm: grad_l2_norm(&gt),
            fd_scale: None,
        });
        state.theta = match cfg.optimizer {
            OptimizerKind::Sgd => sgd_step(&state.theta, &gt, cfg.eta_theta)?,
            OptimizerKind::AdamCosine => {
                adam_step(&mut state.adam_theta, &state.theta, &gt, cfg.cosine_lr(k))?
            }
        };
        state.w = step_family(cfg, k, &mut state.adam_w, &state.w, &gw, cfg.eta_w)?;
        state.iter += 1;
    }
    Ok(rows)
}

/// Alternating baseline: a denoiser-only first phase updates `w`, then
/// a second phase trains `theta` on the lower loss with `w` left
/// untouched (the phase-two `w` tensors are never reassigned, so they
/// stay bit-identical to the end of phase one).
pub fn alternating_train(
    obj: &mut impl BilevelObjectives,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let split = cfg.phase1_iters();
    let mut rows = Vec::new();
    while state.iter < cfg.end_iter() {
        let k = state.iter;
        obj.advance(k);
        let phi = obj.phi(&state.w, &state.theta)?.item()?;
        if k < split {
            let psi = obj.psi(&state.w, &state.theta)?.item()?;
            let (_, gw, _) = eval_with(|wa, _| obj.den_only(wa), &state.w, &state.theta)?;
            rows.push(LogRow {
                iter: k,
                psi,
                phi,
                grad_w_norm: grad_l2_norm(&gw),
                grad_theta_norm: 0.0,
                fd_scale: None,
            });
            state.w = step_family(cfg, k, &mut state.adam_w, &state.w, &gw, cfg.eta_w)?;
        } else {
            let (psi, _, gt) = eval_with(|wa, ta| obj.psi(wa, ta), &state.w, &state.theta)?;
            rows.push(LogRow {
                iter: k,
                psi,
                phi,
                grad_w_norm: 0.0,
                grad_theta_norm: grad_l2_norm(&gt),
                fd_scale: None,
            });
            state.theta = match cfg.optimizer {
                OptimizerKind::Sgd => sgd_step(&state.theta, &gt, cfg.eta_theta)?,
                OptimizerKind::AdamCosine => {
                    adam_step(&mut state.adam_theta, &state.theta, &gt, cfg.cosine_lr(k))?
                }
            };
        }
        state.iter += 1;
    }
    Ok(rows)
}

const CKPT_ITER: &str = "meta.iter";
const CKPT_W: &str = "w.";
const CKPT_THETA: &str = "theta.";

fn adam_to_entries(out: &mut ParamSet, family: &str, adam: &AdamState) -> Result<()> {
    out.insert(
        format!("opt.{family}.t"),
        Tensor::new(vec![1], vec![adam.t as f64])?,
    )?;
    for (name, m, v) in adam.moments() {
        out.insert(
            format!("opt.{family}.m.{name}"),
            Tensor::new(vec![m.len()], m.to_vec())?,
        )?;
        out.insert(
            format!("opt.{family}.v.{name}"),
            Tensor::new(vec![v.len()], v.to_vec())?,
        )?;
    }
    Ok(())
}

/// Writes the full training state as one parameter-set file: the
/// completed iteration count under `meta.iter`, parameters under
/// `w.`/`theta.` prefixes, and optimizer moments under `opt.`.
pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let mut out = ParamSet::new();
    out.insert(CKPT_ITER, Tensor::new(vec![1], vec![state.iter as f64])?)?;
    for (name, t) in state.w.iter() {
        out.insert(format!("{CKPT_W}{name}"), t.detach())?;
    }
    for (name, t) in state.theta.iter() {
        out.insert(format!("{CKPT_THETA}{name}"), t.detach())?;
    }
    adam_to_entries(&mut out, "w", &state.adam_w)?;
    adam_to_entries(&mut out, "theta", &state.adam_theta)?;
    out.save(path)?;
    Ok(())
}

fn take_u64(t: &Tensor, what: &str) -> Result<u64> {
    let v = t.data().first().copied().unwrap_or(f64::NAN);
    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= (1u64 << 53) as f64) {
        return Err(BilevelError::Checkpoint(format!(
            "{what} must be a small non-negative integer, got {v}"
        )));
    }
    Ok(v as u64)
}

/// Loads a state saved by [`save_checkpoint`]. Parameter order and
/// values round-trip exactly.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let ps = ParamSet::load(path)?;
    let mut iter = None;
    let mut w = ParamSet::new();
    let mut theta = ParamSet::new();
    let mut adam_w = AdamState::new(AdamConfig::default());
    let mut adam_theta = AdamState::new(AdamConfig::default());
    let mut moments: Vec<(String, String, bool, Tensor)> = Vec::new();
    for (name, t) in ps.iter() {
        if name == CKPT_ITER {
            iter = Some(take_u64(t, CKPT_ITER)? as usize);
        } else if let Some(rest) = name.strip_prefix(CKPT_W) {
            w.insert(rest, t.detach())?;
        } else if let Some(rest) = name.strip_prefix(CKPT_THETA) {
            theta.insert(rest, t.detach())?;
        } else if let Some(rest) = name.strip_prefix("opt.") {
            let (family, tail) = rest
                .split_once('.')
                .ok_or_else(|| BilevelError::Checkpoint(format!("malformed entry {name}")))?;
            if family != "w" && family != "theta" {
                return Err(BilevelError::Checkpoint(format!(
                    "unknown optimizer family in {name}"
                )));
            }
            let adam = if family == "w" { &mut adam_w } else { &mut adam_theta };
            if tail == "t" {
                adam.t = take_u64(t, name)?;
            } else if let Some(pname) = tail.strip_prefix("m.") {
                moments.push((family.to_string(), pname.to_string(), true, t.detach()));
            } else if let Some(pname) = tail.strip_prefix("v.") {
                moments.push((family.to_string(), pname.to_string(), false, t.detach()));
            } else {
                return Err(BilevelError::Checkpoint(format!("malformed entry {name}")));
            }
        } else {
            return Err(BilevelError::Checkpoint(format!("unknown entry {name}")));
        }
    }
    // Pair first and second moments per family and parameter.
    let mut firsts: std::collections::BTreeMap<(String, String), Tensor> =
        std::collections::BTreeMap::new();
    let mut seconds: std::collections::BTreeMap<(String, String), Tensor> =
        std::collections::BTreeMap::new();
    for (family, pname, is_first, t) in moments {
        let key = (family, pname);
        let dup = if is_first {
            firsts.insert(key.clone(), t).is_some()
        } else {
            seconds.insert(key.clone(), t).is_some()
        };
        if dup {
            return Err(BilevelError::Checkpoint(format!(
                "duplicate moment for {}/{}",
                key.0, key.1
            )));
        }
    }
    if firsts.len() != seconds.len()
        || firsts.keys().zip(seconds.keys()).any(|(a, b)| a != b)
    {
        return Err(BilevelError::Checkpoint(
            "first and second moments do not pair up".to_string(),
        ));
    }
    for ((family, pname), m) in firsts {
        let v = seconds.remove(&(family.clone(), pname.clone())).expect("paired");
        let adam = if family == "w" { &mut adam_w } else { &mut adam_theta };
        adam.set_moment(pname, m.data().to_vec(), v.data().to_vec())?;
    }
    let iter = iter.ok_or_else(|| {
        BilevelError::Checkpoint("missing meta.iter entry".to_string())
    })?;
    if w.is_empty() || theta.is_empty() {
        return Err(BilevelError::Checkpoint(
            "checkpoint is missing a parameter family".to_string(),
        ));
    }
    Ok(TrainState {
        w,
        theta,
        iter,
        adam_w,
        adam_theta,
    })
}
