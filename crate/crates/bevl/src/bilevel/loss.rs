//! The two training losses: L1 enhancement reconstruction and per-pixel
//! cross-entropy for event classification.

use super::{BilevelError, Result};
use crate::event::PolarityMap;
use crate::tensor::Tensor;

/// Weight on the illumination and reflectance terms relative to the
/// reconstruction term.
const AUX_WEIGHT: f64 = 0.5;

fn mean_l1(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(BilevelError::Shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.sub(b)?.abs()?.mean()?)
}

/// Enhancement loss: mean absolute error on the reconstructed bright
/// image, plus half-weighted mean absolute errors on the predicted
/// illumination and reflectance against their decomposition targets.
///
/// Predictions may be attached; targets are treated as constants.
pub fn enh_loss(
    pred_high: &Tensor,
    pred_illum: &Tensor,
    pred_refl: &Tensor,
    target_high: &Tensor,
    target_illum: &Tensor,
    target_refl: &Tensor,
) -> Result<Tensor> {
    let recon = mean_l1(pred_high, target_high, "reconstruction")?;
    let illum = mean_l1(pred_illum, target_illum, "illumination")?;
    let refl = mean_l1(pred_refl, target_refl, "reflectance")?;
    Ok(recon.add(&illum.add(&refl)?.scale(AUX_WEIGHT)?)?)
}

/// Per-pixel cross-entropy of the class logits against a one-hot
/// polarity target, averaged over pixels.
///
/// `logits` must have shape (3, H, W) matching the map. The softmax is
/// folded into a log-sum-exp stabilized by the detached per-pixel
/// maximum, so large logits stay finite. Uniform logits give exactly
/// ln 3.
pub fn den_loss(logits: &Tensor, target: &PolarityMap) -> Result<Tensor> {
    let (h, w) = (target.height(), target.width());
    if logits.shape() != [3, h, w] {
        return Err(BilevelError::Shape(format!(
            "class logits {:?} vs polarity target (3, {h}, {w})",
            logits.shape()
        )));
    }
    let n = h * w;
    let data = logits.data();
    let mut mx = vec![f64::NEG_INFINITY; n];
    for c in 0..3 {
        for i in 0..n {
            mx[i] = mx[i].max(data[c * n + i]);
        }
    }
    // Constant shift: subtracting it inside the exp and adding it back
    // outside the log leaves the loss value and gradient unchanged.
    let mut mx3 = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        mx3.extend_from_slice(&mx);
    }
    let shift1 = Tensor::new(vec![1, h, w], mx)?;
    let shift3 = Tensor::new(vec![3, h, w], mx3)?;

    let e = logits.sub(&shift3)?.exp()?;
    let sum = e
        .slice(0, 0, 1)?
        .add(&e.slice(0, 1, 1)?)?
        .add(&e.slice(0, 2, 1)?)?;
    let lse = sum.log()?.add(&shift1)?;

    let picked_channels = logits.mul(&target.to_onehot()?)?;
    let picked = picked_channels
        .slice(0, 0, 1)?
        .add(&picked_channels.slice(0, 1, 1)?)?
        .add(&picked_channels.slice(0, 2, 1)?)?;

    Ok(lse.sub(&picked)?.mean()?)
}
