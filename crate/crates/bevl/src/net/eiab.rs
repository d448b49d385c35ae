//! Event-image attention block.
//!
//! Channel attention between an image feature map and an event feature
//! map of the same shape: `Q = Wq F_img`, `K = Wk F_ev`, `V = Wv F_ev`
//! (1x1 convolutions), each channel's spatial vector L2-normalized, and
//! `A = softmax(alpha * K Q^T)` row-wise over the `C x C` product. The
//! output is `Wp(A V) + CPE(V) + F_img`, where CPE is a depthwise 3x3
//! positional encoding and the residual is always added.

use rand_chacha::ChaCha12Rng;

use crate::tensor::{ParamSet, Tensor};

use super::{init_conv, init_depthwise, NetError, Result};

/// Registers one block's parameters under `prefix`: `wq`, `wk`, `wv`
/// (no bias), `wp`, `cpe`, and the scalar attention temperature
/// `alpha` (initialized to 1).
pub fn init_eiab(
    ps: &mut ParamSet,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    c: usize,
) -> Result<()> {
    init_conv(ps, rng, &format!("{prefix}.wq"), c, c, 1, false)?;
    init_conv(ps, rng, &format!("{prefix}.wk"), c, c, 1, false)?;
    init_conv(ps, rng, &format!("{prefix}.wv"), c, c, 1, false)?;
    init_conv(ps, rng, &format!("{prefix}.wp"), c, c, 1, true)?;
    init_depthwise(ps, rng, &format!("{prefix}.cpe"), c, 3)?;
    ps.insert(format!("{prefix}.alpha"), Tensor::new(vec![1], vec![1.0])?)?;
    Ok(())
}

/// Divides each row of a `(C, N)` matrix by its L2 norm (stabilized by
/// 1e-12 under the root).
fn normalize_rows(m: &Tensor, c: usize, n: usize) -> Result<Tensor> {
    let sums = m.mul(m)?.matmul(&Tensor::full(vec![n, 1], 1.0)?)?;
    let norms = sums.add(&Tensor::full(vec![c, 1], 1e-12)?)?.powf(0.5)?;
    let full = norms.matmul(&Tensor::full(vec![1, n], 1.0)?)?;
    Ok(m.div(&full)?)
}

fn check_pair(f_img: &Tensor, f_ev: &Tensor) -> Result<(usize, usize, usize)> {
    if let ([c, h, w], true) = (f_img.shape(), f_img.shape() == f_ev.shape()) {
        return Ok((*c, *h, *w));
    }
    Err(NetError::Input {
        want: format!("event features with shape {:?}", f_img.shape()),
        got: f_ev.shape().to_vec(),
    })
}

/// The row-stochastic `C x C` attention matrix and the projected value
/// feature, shared by the forward pass and the diagnostics.
fn attention_parts(
    ps: &ParamSet,
    prefix: &str,
    f_img: &Tensor,
    f_ev: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = check_pair(f_img, f_ev)?;
    let n = h * w;
    let q = f_img.conv2d(ps.require(&format!("{prefix}.wq.w"))?, None)?;
    let k = f_ev.conv2d(ps.require(&format!("{prefix}.wk.w"))?, None)?;
    let v = f_ev.conv2d(ps.require(&format!("{prefix}.wv.w"))?, None)?;
    let qn = normalize_rows(&q.reshape(vec![c, n])?, c, n)?;
    let kn = normalize_rows(&k.reshape(vec![c, n])?, c, n)?;
    let sim = kn.matmul(&qn.transpose(vec![1, 0])?)?;
    // Broadcast the scalar temperature to (C, C) through rank-1 products.
    let alpha = ps.require(&format!("{prefix}.alpha"))?.reshape(vec![1, 1])?;
    let col = Tensor::full(vec![c, 1], 1.0)?.matmul(&alpha)?;
    let full = col.matmul(&Tensor::full(vec![1, c], 1.0)?)?;
    let a = sim.mul(&full)?.softmax(1)?;
    Ok((a, v))
}

/// Full block: attention-mixed values, positional encoding, residual.
pub fn eiab_forward(
    ps: &ParamSet,
    prefix: &str,
    f_img: &Tensor,
    f_ev: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = check_pair(f_img, f_ev)?;
    let (a, v) = attention_parts(ps, prefix, f_img, f_ev)?;
    let mixed = a.matmul(&v.reshape(vec![c, h * w])?)?.reshape(vec![c, h, w])?;
    let proj = mixed.conv2d(
        ps.require(&format!("{prefix}.wp.w"))?,
        Some(ps.require(&format!("{prefix}.wp.b"))?),
    )?;
    let cpe = v.depthwise_conv2d(
        ps.require(&format!("{prefix}.cpe.w"))?,
        Some(ps.require(&format!("{prefix}.cpe.b"))?),
    )?;
    Ok(proj.add(&cpe)?.add(f_img)?)
}

/// The attention matrix alone, for structural checks.
pub fn eiab_attention(
    ps: &ParamSet,
    prefix: &str,
    f_img: &Tensor,
    f_ev: &Tensor,
) -> Result<Tensor> {
    Ok(attention_parts(ps, prefix, f_img, f_ev)?.0)
}
