//! One-step truncated hypergradient with a finite-difference
//! Hessian-vector correction.

use super::{BilevelError, BilevelObjectives, Result};
use crate::tensor::{backward, grad_l2_norm, GradMap, ParamSet, Tape, Tensor};

/// Relative probe length for the symmetric difference; the actual step
/// is this divided by the direction's norm.
pub const FD_M_SCALE: f64 = 0.01;

const W_PREFIX: &str = "w/";
const THETA_PREFIX: &str = "t/";

/// Evaluates one objective with both parameter families attached and
/// splits the resulting gradients by family.
pub(super) fn eval_with<F>(f: F, w: &ParamSet, theta: &ParamSet) -> Result<(f64, GradMap, GradMap)>
where
    F: FnOnce(&ParamSet, &ParamSet) -> Result<Tensor>,
{
    let tape = Tape::new();
    let wa = w.attach(&tape, W_PREFIX)?;
    let ta = theta.attach(&tape, THETA_PREFIX)?;
    let loss = f(&wa, &ta)?;
    let value = loss.item()?;
    let grads = backward(&loss)?;
    let mut gw = GradMap::new();
    let mut gt = GradMap::new();
    for (name, g) in grads {
        if let Some(stripped) = name.strip_prefix(W_PREFIX) {
            gw.insert(stripped.to_string(), g);
        } else if let Some(stripped) = name.strip_prefix(THETA_PREFIX) {
            gt.insert(stripped.to_string(), g);
        }
    }
    Ok((value, gw, gt))
}

/// `ca * a + cb * b` entrywise by name; a missing entry counts as zero.
fn linear(a: &GradMap, ca: f64, b: &GradMap, cb: f64) -> Result<GradMap> {
    let mut out = GradMap::new();
    for (name, ta) in a {
        let data: Vec<f64> = match b.get(name) {
            Some(tb) => {
                if ta.shape() != tb.shape() {
                    return Err(BilevelError::Shape(format!(
                        "gradient entry {name}: {:?} vs {:?}",
                        ta.shape(),
                        tb.shape()
                    )));
                }
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| ca * x + cb * y)
                    .collect()
            }
            None => ta.data().iter().map(|x| ca * x).collect(),
        };
        out.insert(name.clone(), Tensor::new(ta.shape().to_vec(), data)?);
    }
    for (name, tb) in b {
        if !a.contains_key(name) {
            let data = tb.data().iter().map(|y| cb * y).collect();
            out.insert(name.clone(), Tensor::new(tb.shape().to_vec(), data)?);
        }
    }
    Ok(out)
}

/// Symmetric-difference estimate of the mixed second derivative of the
/// lower loss, applied to a direction over the lower parameters:
///
/// `(grad_w psi(w, theta + e v) - grad_w psi(w, theta - e v)) / (2 e)`
///
/// with `e = FD_M_SCALE / ||v||`. Returns the estimate (over the upper
/// parameters) and the `e` actually used. A zero direction yields a
/// zero estimate and `e = 0` without evaluating anything.
pub fn fd_hvp(
    obj: &impl BilevelObjectives,
    w: &ParamSet,
    theta: &ParamSet,
    v: &GradMap,
) -> Result<(GradMap, f64)> {
    fd_hvp_scaled(obj, w, theta, v, FD_M_SCALE)
}

/// [`fd_hvp`] with an explicit relative probe length.
pub(super) fn fd_hvp_scaled(
    obj: &impl BilevelObjectives,
    w: &ParamSet,
    theta: &ParamSet,
    v: &GradMap,
    m_scale: f64,
) -> Result<(GradMap, f64)> {
    if !(m_scale.is_finite() && m_scale > 0.0) {
        return Err(BilevelError::BadConfig(format!(
            "probe length {m_scale} must be positive and finite"
        )));
    }
    let norm = grad_l2_norm(v);
    if norm == 0.0 {
        return Ok((GradMap::new(), 0.0));
    }
    if !norm.is_finite() {
        return Err(BilevelError::BadConfig(format!(
            "finite-difference direction has non-finite norm {norm}"
        )));
    }
    let eps = m_scale / norm;
    let theta_plus = theta.axpy(v, eps)?;
    let theta_minus = theta.axpy(v, -eps)?;
    let (_, gw_plus, _) = eval_with(|wa, ta| obj.psi(wa, ta), w, &theta_plus)?;
    let (_, gw_minus, _) = eval_with(|wa, ta| obj.psi(wa, ta), w, &theta_minus)?;
    Ok((linear(&gw_plus, 0.5 / eps, &gw_minus, -0.5 / eps)?, eps))
}

/// Diagnostics for one hypergradient evaluation.
#[derive(Clone, Debug)]
pub struct HypergradReport {
    /// Norm of the direct term `grad_w phi(w, theta')`.
    pub direct_norm: f64,
    /// Norm of the correction term `-eta * hvp`.
    pub correction_norm: f64,
    /// Finite-difference step actually used; 0 when skipped.
    pub fd_scale: f64,
    /// True when the upper loss had no gradient through `theta'`, so
    /// the correction was skipped as exactly zero.
    pub skipped: bool,
}

/// One full hypergradient evaluation at `(w, theta)`.
pub struct HypergradStep {
    /// Update direction for the upper parameters.
    pub hypergrad: GradMap,
    /// The probed one-step lower update `theta - eta * grad_theta psi`.
    pub theta_prime: ParamSet,
    /// The lower gradient that produced `theta_prime`; committing
    /// `theta_prime` reuses exactly this object.
    pub grad_theta_psi: GradMap,
    /// Lower loss at `(w, theta)`.
    pub psi: f64,
    /// Upper loss at `(w, theta_prime)`.
    pub phi: f64,
    pub report: HypergradReport,
}

/// Computes the one-step truncated hypergradient
///
/// `grad_w phi(w, theta') - eta * H_fd(w, theta) grad_theta' phi`
///
/// where `theta' = theta - eta * grad_theta psi(w, theta)` and `H_fd`
/// is the finite-difference mixed second derivative of the lower loss.
/// With `eta = 0` this reduces to the direct gradient of the upper
/// loss at the unmoved lower parameters.
pub fn hypergradient(
    obj: &impl BilevelObjectives,
    w: &ParamSet,
    theta: &ParamSet,
    eta_theta: f64,
    m_scale: f64,
) -> Result<HypergradStep> {
    if !(eta_theta.is_finite() && eta_theta >= 0.0) {
        return Err(BilevelError::BadConfig(format!(
            "lower step size {eta_theta} must be finite and non-negative"
        )));
    }
    let (psi, _, grad_theta_psi) = eval_with(|wa, ta| obj.psi(wa, ta), w, theta)?;
    let theta_prime = theta.axpy(&grad_theta_psi, -eta_theta)?;
    let (phi, direct, v) = eval_with(|wa, ta| obj.phi(wa, ta), w, &theta_prime)?;

    let v_norm = grad_l2_norm(&v);
    let (hypergrad, report) = if v_norm == 0.0 || eta_theta == 0.0 {
        let report = HypergradReport {
            direct_norm: grad_l2_norm(&direct),
            correction_norm: 0.0,
            fd_scale: 0.0,
            skipped: v_norm == 0.0,
        };
        (direct, report)
    } else {
        let (hvp, fd_scale) = fd_hvp_scaled(obj, w, theta, &v, m_scale)?;
        let correction = linear(&hvp, -eta_theta, &GradMap::new(), 0.0)?;
        let report = HypergradReport {
            direct_norm: grad_l2_norm(&direct),
            correction_norm: grad_l2_norm(&correction),
            fd_scale,
            skipped: false,
        };
        (linear(&direct, 1.0, &correction, 1.0)?, report)
    };
    Ok(HypergradStep {
        hypergrad,
        theta_prime,
        grad_theta_psi,
        psi,
        phi,
        report,
    })
}
