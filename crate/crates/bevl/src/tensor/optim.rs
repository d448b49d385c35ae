//! Parameter update rules and the finite-difference gradient oracle.

use std::collections::BTreeMap;

use super::tape::GradMap;
use super::{ParamSet, Result, Tensor, TensorError};

fn check_grad(name: &str, param: &Tensor, grad: &Tensor) -> Result<()> {
    if grad.shape() != param.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "optimizer",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if grad.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::Param {
            name: name.to_string(),
            what: "non-finite gradient".to_string(),
        });
    }
    Ok(())
}

/// Plain gradient descent: `p - lr * g` per entry. Parameters without a
/// gradient entry are returned unchanged.
pub fn sgd_step(params: &ParamSet, grads: &GradMap, lr: f64) -> Result<ParamSet> {
    if !lr.is_finite() {
        return Err(TensorError::Invalid {
            op: "sgd_step",
            what: "non-finite learning rate".to_string(),
        });
    }
    for (name, t) in params.iter() {
        if let Some(g) = grads.get(name) {
            check_grad(name, t, g)?;
        }
    }
    params.axpy(grads, -lr)
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, keyed like the parameter set they
/// were stepped with. Missing gradients decay the moments toward zero.
#[derive(Clone, Default)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Stored moment pairs as (name, first, second), in name order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.m.iter().map(|(name, m)| {
            // m and v are inserted in lockstep, so the pair always exists.
            let v = self.v.get(name).expect("moment pair");
            (name.as_str(), m.as_slice(), v.as_slice())
        })
    }

    /// Restores one moment pair, e.g. when loading a checkpoint.
    pub fn set_moment(
        &mut self,
        name: impl Into<String>,
        m: Vec<f64>,
        v: Vec<f64>,
    ) -> Result<()> {
        let name = name.into();
        if m.len() != v.len() {
            return Err(TensorError::Param {
                name,
                what: "moment vectors differ in length".to_string(),
            });
        }
        self.m.insert(name.clone(), m);
        self.v.insert(name, v);
        Ok(())
    }
}

/// One bias-corrected Adam update. The first step moves each coordinate by
/// roughly `lr` in the gradient's direction.
pub fn adam_step(
    state: &mut AdamState,
    params: &ParamSet,
    grads: &GradMap,
    lr: f64,
) -> Result<ParamSet> {
    if !lr.is_finite() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            what: "non-finite learning rate".to_string(),
        });
    }
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let mut out = ParamSet::new();
    for (name, p) in params.iter() {
        let zeros;
        let g: &[f64] = match grads.get(name) {
            Some(g) => {
                check_grad(name, p, g)?;
                g.data()
            }
            None => {
                zeros = vec![0.0; p.numel()];
                &zeros
            }
        };
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; p.numel()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; p.numel()]);
        let mut data = Vec::with_capacity(p.numel());
        for i in 0..p.numel() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            data.push(p.data()[i] - lr * mh / (vh.sqrt() + eps));
        }
        out.insert(name.to_string(), Tensor::new(p.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Central-difference gradient of a scalar function of the parameters.
/// Independent of the tape machinery; used as the reference oracle for
/// backward passes.
pub fn fd_gradient<F>(mut f: F, params: &ParamSet, h: f64) -> Result<GradMap>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(TensorError::Invalid {
            op: "fd_gradient",
            what: format!("step {h} must be positive and finite"),
        });
    }
    let mut flat = params.flatten();
    let mut grad_flat = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + h;
        let fp = f(&params.unflatten(&flat)?)?;
        flat[i] = orig - h;
        let fm = f(&params.unflatten(&flat)?)?;
        flat[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::Domain {
                op: "fd_gradient",
                what: format!("non-finite objective near coordinate {i}"),
            });
        }
        grad_flat[i] = (fp - fm) / (2.0 * h);
    }
    let as_params = params.unflatten(&grad_flat)?;
    let mut out = GradMap::new();
    for (name, t) in as_params.iter() {
        out.insert(name.to_string(), t.detach());
    }
    Ok(out)
}
