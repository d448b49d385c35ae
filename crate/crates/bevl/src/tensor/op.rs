//! The closed primitive set: forward evaluation and backward formulas.
//!
//! `Reshape` is the one structural extra beyond the numeric primitives; it
//! moves no data and exists so channel-matrix products can be expressed with
//! `MatMul`.

use std::sync::Arc;

use super::tape::{common_tape, NodeInput};
use super::{numel, strides, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    /// Rank-2 matrix product.
    MatMul,
    /// Stride-1, zero-padded "same" convolution. Inputs: x `(Ci,H,W)`,
    /// weight `(Co,Ci,Kh,Kw)` with odd kernels, optional bias `(Co)`.
    Conv2d,
    /// Per-channel stride-1 "same" convolution. Inputs: x `(C,H,W)`,
    /// weight `(C,Kh,Kw)` odd, optional bias `(C)`.
    DepthwiseConv2d,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    Exp,
    Log,
    Abs,
    Power {
        exponent: f64,
    },
    /// Full reduction to shape `[1]`.
    Sum,
    /// Full reduction to shape `[1]`.
    Mean,
    Softmax {
        axis: usize,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// 2x2 average pooling; spatial extents must be even.
    AvgPool2,
    /// 2x nearest-neighbour upsampling.
    UpsampleNearest2,
    Transpose {
        axes: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Conv2d => "conv2d",
            Op::DepthwiseConv2d => "depthwise_conv2d",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Power { .. } => "power",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::AvgPool2 => "avgpool2",
            Op::UpsampleNearest2 => "upsample_nearest2",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
        }
    }
}

/// Applies a primitive. The output is recorded on the inputs' tape when at
/// least one input is attached; otherwise it is a plain tensor.
pub fn apply(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let (out_shape, out_data) = eval(op, inputs)?;
    if let Some(index) = out_data.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::Domain {
            op: op.name(),
            what: format!("non-finite output at flat index {index}"),
        });
    }
    let data = Arc::new(out_data);
    match common_tape(inputs)? {
        None => Ok(Tensor::from_parts(out_shape, data, None)),
        Some(tape) => {
            let node = tape.record(op.clone(), inputs, out_shape.clone(), Arc::clone(&data))?;
            Ok(Tensor::from_parts(out_shape, data, Some(node)))
        }
    }
}

fn want_arity(op: &Op, inputs: &[&Tensor], want: usize) -> Result<()> {
    if inputs.len() != want {
        return Err(TensorError::Invalid {
            op: op.name(),
            what: format!("expected {want} inputs, got {}", inputs.len()),
        });
    }
    Ok(())
}

fn same_shape(op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank3(op: &Op, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::Invalid {
            op: op.name(),
            what: format!("expected rank-3 input, got shape {:?}", t.shape()),
        }),
    }
}

fn eval(op: &Op, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    match op {
        Op::Add | Op::Sub | Op::Mul => {
            want_arity(op, inputs, 2)?;
            same_shape(op, inputs[0], inputs[1])?;
            let a = inputs[0].data();
            let b = inputs[1].data();
            let out = match op {
                Op::Add => a.iter().zip(b).map(|(x, y)| x + y).collect(),
                Op::Sub => a.iter().zip(b).map(|(x, y)| x - y).collect(),
                _ => a.iter().zip(b).map(|(x, y)| x * y).collect(),
            };
            Ok((inputs[0].shape().to_vec(), out))
        }
        Op::Div => {
            want_arity(op, inputs, 2)?;
            same_shape(op, inputs[0], inputs[1])?;
            let a = inputs[0].data();
            let b = inputs[1].data();
            if let Some(index) = b.iter().position(|&v| v == 0.0) {
                return Err(TensorError::Domain {
                    op: op.name(),
                    what: format!("zero divisor at flat index {index}"),
                });
            }
            Ok((
                inputs[0].shape().to_vec(),
                a.iter().zip(b).map(|(x, y)| x / y).collect(),
            ))
        }
        Op::MatMul => {
            want_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let ([n, k], [k2, m]) = (a.shape(), b.shape()) else {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: format!(
                        "expected rank-2 inputs, got {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    ),
                });
            };
            let (n, k, k2, m) = (*n, *k, *k2, *m);
            if k != k2 {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Ok((vec![n, m], gemm(a.data(), b.data(), n, k, m)))
        }
        Op::Conv2d => {
            if inputs.len() != 2 && inputs.len() != 3 {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: format!("expected 2 or 3 inputs, got {}", inputs.len()),
                });
            }
            let (ci, h, w) = rank3(op, inputs[0])?;
            let &[co, ci2, kh, kw] = inputs[1].shape() else {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: format!("expected rank-4 weight, got shape {:?}", inputs[1].shape()),
                });
            };
            if ci != ci2 || kh % 2 == 0 || kw % 2 == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    lhs: inputs[0].shape().to_vec(),
                    rhs: inputs[1].shape().to_vec(),
                });
            }
            let bias = match inputs.get(2) {
                Some(b) => {
                    if b.shape() != [co] {
                        return Err(TensorError::ShapeMismatch {
                            op: op.name(),
                            lhs: vec![co],
                            rhs: b.shape().to_vec(),
                        });
                    }
                    Some(b.data())
                }
                None => None,
            };
            let out = conv2d_fwd(inputs[0].data(), ci, h, w, inputs[1].data(), co, kh, kw, bias);
            Ok((vec![co, h, w], out))
        }
        Op::DepthwiseConv2d => {
            if inputs.len() != 2 && inputs.len() != 3 {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: format!("expected 2 or 3 inputs, got {}", inputs.len()),
                });
            }
            let (c, h, w) = rank3(op, inputs[0])?;
            let &[c2, kh, kw] = inputs[1].shape() else {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: format!("expected rank-3 weight, got shape {:?}", inputs[1].shape()),
                });
            };
            if c != c2 || kh % 2 == 0 || kw % 2 == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    lhs: inputs[0].shape().to_vec(),
                    rhs: inputs[1].shape().to_vec(),
                });
            }
            let bias = match inputs.get(2) {
                Some(b) => {
                    if b.shape() != [c] {
                        return Err(TensorError::ShapeMismatch {
                            op: op.name(),
                            lhs: vec![c],
                            rhs: b.shape().to_vec(),
                        });
                    }
                    Some(b.data())
                }
                None => None,
            };
            let out = depthwise_fwd(inputs[0].data(), c, h, w, inputs[1].data(), kh, kw, bias);
            Ok((vec![c, h, w], out))
        }
        Op::Relu => {
            want_arity(op, inputs, 1)?;
            Ok((
                inputs[0].shape().to_vec(),
                inputs[0].data().iter().map(|&x| x.max(0.0)).collect(),
            ))
        }
        Op::LeakyRelu { slope } => {
            want_arity(op, inputs, 1)?;
            if !slope.is_finite() {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: "non-finite slope".to_string(),
                });
            }
            Ok((
                inputs[0].shape().to_vec(),
                inputs[0]
                    .data()
                    .iter()
                    .map(|&x| if x > 0.0 { x } else { slope * x })
                    .collect(),
            ))
        }
        Op::Sigmoid => {
            want_arity(op, inputs, 1)?;
            Ok((
                inputs[0].shape().to_vec(),
                inputs[0]
                    .data()
                    .iter()
                    .map(|&x| 1.0 / (1.0 + (-x).exp()))
                    .collect(),
            ))
        }
        Op::Exp => {
            want_arity(op, inputs, 1)?;
            Ok((
                inputs[0].shape().to_vec(),
                inputs[0].data().iter().map(|&x| x.exp()).collect(),
            ))
        }
        Op::Log => {
            want_arity(op, inputs, 1)?;
            if let Some(index) = inputs[0].data().iter().position(|&v| v <= 0.0) {
                return Err(TensorError::Domain {
                    op: op.name(),
                    what: format!("non-positive input at flat index {index}"),
                });
            }
            Ok((
                inputs[0].shape().to_vec(),
                inputs[0].data().iter().map(|&x| x.ln()).collect(),
            ))
        }
        Op::Abs => {
            want_arity(op, inputs, 1)?;
            Ok((
                inputs[0].shape().to_vec(),
                inputs[0].data().iter().map(|&x| x.abs()).collect(),
            ))
        }
        Op::Power { exponent } => {
            want_arity(op, inputs, 1)?;
            let p = *exponent;
            if !p.is_finite() {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: "non-finite exponent".to_string(),
                });
            }
            let integral = p.fract() == 0.0;
            for (index, &x) in inputs[0].data().iter().enumerate() {
                if (!integral && x < 0.0) || (x == 0.0 && p < 1.0) {
                    return Err(TensorError::Domain {
                        op: op.name(),
                        what: format!("base {x} with exponent {p} at flat index {index}"),
                    });
                }
            }
            Ok((
                inputs[0].shape().to_vec(),
                inputs[0].data().iter().map(|&x| x.powf(p)).collect(),
            ))
        }
        Op::Sum => {
            want_arity(op, inputs, 1)?;
            Ok((vec![1], vec![inputs[0].data().iter().sum()]))
        }
        Op::Mean => {
            want_arity(op, inputs, 1)?;
            let n = inputs[0].numel() as f64;
            let s: f64 = inputs[0].data().iter().sum();
            Ok((vec![1], vec![s / n]))
        }
        Op::Softmax { axis } => {
            want_arity(op, inputs, 1)?;
            let shape = inputs[0].shape();
            if *axis >= shape.len() {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: format!("axis {axis} out of range for shape {shape:?}"),
                });
            }
            let mut out = inputs[0].data().to_vec();
            for_each_lane(shape, *axis, |base, stride, len| {
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(out[base + k * stride]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (out[base + k * stride] - max).exp();
                    out[base + k * stride] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[base + k * stride] /= sum;
                }
            });
            Ok((shape.to_vec(), out))
        }
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: "expected at least one input".to_string(),
                });
            }
            let rank = inputs[0].shape().len();
            if *axis >= rank {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: format!("axis {axis} out of range for rank {rank}"),
                });
            }
            let mut out_shape = inputs[0].shape().to_vec();
            out_shape[*axis] = 0;
            for t in inputs {
                let agrees = t.shape().len() == rank
                    && t.shape()
                        .iter()
                        .zip(inputs[0].shape())
                        .enumerate()
                        .all(|(i, (&e, &e0))| i == *axis || e == e0);
                if !agrees {
                    return Err(TensorError::ShapeMismatch {
                        op: op.name(),
                        lhs: inputs[0].shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                out_shape[*axis] += t.shape()[*axis];
            }
            let inner: usize = inputs[0].shape()[*axis + 1..].iter().product();
            let outer: usize = inputs[0].shape()[..*axis].iter().product();
            let total_chunk: usize = out_shape[*axis] * inner;
            let mut out = vec![0.0; numel(&out_shape)];
            let mut prefix = 0usize;
            for t in inputs {
                let chunk = t.shape()[*axis] * inner;
                for o in 0..outer {
                    let src = &t.data()[o * chunk..(o + 1) * chunk];
                    out[o * total_chunk + prefix..o * total_chunk + prefix + chunk]
                        .copy_from_slice(src);
                }
                prefix += chunk;
            }
            Ok((out_shape, out))
        }
        Op::Slice { axis, start, len } => {
            want_arity(op, inputs, 1)?;
            let shape = inputs[0].shape();
            if *axis >= shape.len() || *len == 0 || start + len > shape[*axis] {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: format!(
                        "slice axis={axis} start={start} len={len} out of range for shape {shape:?}"
                    ),
                });
            }
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let src_chunk = shape[*axis] * inner;
            let dst_chunk = len * inner;
            let mut out_shape = shape.to_vec();
            out_shape[*axis] = *len;
            let mut out = vec![0.0; outer * dst_chunk];
            for o in 0..outer {
                let src = &inputs[0].data()[o * src_chunk + start * inner..][..dst_chunk];
                out[o * dst_chunk..(o + 1) * dst_chunk].copy_from_slice(src);
            }
            Ok((out_shape, out))
        }
        Op::AvgPool2 => {
            want_arity(op, inputs, 1)?;
            let (c, h, w) = rank3(op, inputs[0])?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: format!("spatial extents must be even, got {h}x{w}"),
                });
            }
            let (ho, wo) = (h / 2, w / 2);
            let x = inputs[0].data();
            let mut out = vec![0.0; c * ho * wo];
            for cc in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let base = (cc * h + 2 * i) * w + 2 * j;
                        out[(cc * ho + i) * wo + j] =
                            0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                    }
                }
            }
            Ok((vec![c, ho, wo], out))
        }
        Op::UpsampleNearest2 => {
            want_arity(op, inputs, 1)?;
            let (c, h, w) = rank3(op, inputs[0])?;
            let (ho, wo) = (h * 2, w * 2);
            let x = inputs[0].data();
            let mut out = vec![0.0; c * ho * wo];
            for cc in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        out[(cc * ho + i) * wo + j] = x[(cc * h + i / 2) * w + j / 2];
                    }
                }
            }
            Ok((vec![c, ho, wo], out))
        }
        Op::Transpose { axes } => {
            want_arity(op, inputs, 1)?;
            let shape = inputs[0].shape();
            if !is_permutation(axes, shape.len()) {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    what: format!("axes {axes:?} is not a permutation of 0..{}", shape.len()),
                });
            }
            let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
            let out = permute(inputs[0].data(), shape, axes);
            Ok((out_shape, out))
        }
        Op::Reshape { shape } => {
            want_arity(op, inputs, 1)?;
            if shape.is_empty() || shape.iter().any(|&e| e == 0) {
                return Err(TensorError::EmptyShape(shape.clone()));
            }
            if numel(shape) != inputs[0].numel() {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    lhs: inputs[0].shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Ok((shape.clone(), inputs[0].data().to_vec()))
        }
    }
}

/// Per-input gradients for one recorded node. Entries are `None` where
/// `needs` is false (constant inputs).
pub(crate) fn backward_op(
    op: &Op,
    inputs: &[NodeInput],
    out_data: &Arc<Vec<f64>>,
    out_shape: &[usize],
    g: &[f64],
    needs: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    let grad = |cond: bool, f: &mut dyn FnMut() -> Vec<f64>| if cond { Some(f()) } else { None };
    match op {
        Op::Add => Ok(vec![
            grad(needs[0], &mut || g.to_vec()),
            grad(needs[1], &mut || g.to_vec()),
        ]),
        Op::Sub => Ok(vec![
            grad(needs[0], &mut || g.to_vec()),
            grad(needs[1], &mut || g.iter().map(|v| -v).collect()),
        ]),
        Op::Mul => {
            let (a, b) = (&inputs[0].data, &inputs[1].data);
            Ok(vec![
                grad(needs[0], &mut || {
                    g.iter().zip(b.iter()).map(|(gv, bv)| gv * bv).collect()
                }),
                grad(needs[1], &mut || {
                    g.iter().zip(a.iter()).map(|(gv, av)| gv * av).collect()
                }),
            ])
        }
        Op::Div => {
            let (a, b) = (&inputs[0].data, &inputs[1].data);
            Ok(vec![
                grad(needs[0], &mut || {
                    g.iter().zip(b.iter()).map(|(gv, bv)| gv / bv).collect()
                }),
                grad(needs[1], &mut || {
                    g.iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect()
                }),
            ])
        }
        Op::MatMul => {
            let (n, k) = (inputs[0].shape[0], inputs[0].shape[1]);
            let m = inputs[1].shape[1];
            let (a, b) = (&inputs[0].data, &inputs[1].data);
            Ok(vec![
                grad(needs[0], &mut || gemm_nt(g, b, n, m, k)),
                grad(needs[1], &mut || gemm_tn(a, g, n, k, m)),
            ])
        }
        Op::Conv2d => {
            let (ci, h, w) = (inputs[0].shape[0], inputs[0].shape[1], inputs[0].shape[2]);
            let (co, kh, kw) = (inputs[1].shape[0], inputs[1].shape[2], inputs[1].shape[3]);
            let mut out = vec![
                grad(needs[0], &mut || {
                    conv2d_bwd_input(g, co, h, w, &inputs[1].data, ci, kh, kw)
                }),
                grad(needs[1], &mut || {
                    conv2d_bwd_weight(g, co, h, w, &inputs[0].data, ci, kh, kw)
                }),
            ];
            if inputs.len() == 3 {
                out.push(grad(needs[2], &mut || {
                    (0..co).map(|o| g[o * h * w..(o + 1) * h * w].iter().sum()).collect()
                }));
            }
            Ok(out)
        }
        Op::DepthwiseConv2d => {
            let (c, h, w) = (inputs[0].shape[0], inputs[0].shape[1], inputs[0].shape[2]);
            let (kh, kw) = (inputs[1].shape[1], inputs[1].shape[2]);
            let mut out = vec![
                grad(needs[0], &mut || {
                    depthwise_bwd_input(g, c, h, w, &inputs[1].data, kh, kw)
                }),
                grad(needs[1], &mut || {
                    depthwise_bwd_weight(g, c, h, w, &inputs[0].data, kh, kw)
                }),
            ];
            if inputs.len() == 3 {
                out.push(grad(needs[2], &mut || {
                    (0..c).map(|cc| g[cc * h * w..(cc + 1) * h * w].iter().sum()).collect()
                }));
            }
            Ok(out)
        }
        Op::Relu => {
            let x = &inputs[0].data;
            Ok(vec![grad(needs[0], &mut || {
                g.iter()
                    .zip(x.iter())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect()
            })])
        }
        Op::LeakyRelu { slope } => {
            let x = &inputs[0].data;
            Ok(vec![grad(needs[0], &mut || {
                g.iter()
                    .zip(x.iter())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { slope * gv })
                    .collect()
            })])
        }
        Op::Sigmoid => {
            let y = out_data;
            Ok(vec![grad(needs[0], &mut || {
                g.iter()
                    .zip(y.iter())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect()
            })])
        }
        Op::Exp => {
            let y = out_data;
            Ok(vec![grad(needs[0], &mut || {
                g.iter().zip(y.iter()).map(|(gv, yv)| gv * yv).collect()
            })])
        }
        Op::Log => {
            let x = &inputs[0].data;
            Ok(vec![grad(needs[0], &mut || {
                g.iter().zip(x.iter()).map(|(gv, xv)| gv / xv).collect()
            })])
        }
        Op::Abs => {
            let x = &inputs[0].data;
            Ok(vec![grad(needs[0], &mut || {
                g.iter()
                    .zip(x.iter())
                    .map(|(gv, xv)| gv * xv.signum() * if *xv == 0.0 { 0.0 } else { 1.0 })
                    .collect()
            })])
        }
        Op::Power { exponent } => {
            let x = &inputs[0].data;
            let p = *exponent;
            Ok(vec![grad(needs[0], &mut || {
                g.iter()
                    .zip(x.iter())
                    .map(|(gv, xv)| gv * p * xv.powf(p - 1.0))
                    .collect()
            })])
        }
        Op::Sum => {
            let n = numel(&inputs[0].shape);
            Ok(vec![grad(needs[0], &mut || vec![g[0]; n])])
        }
        Op::Mean => {
            let n = numel(&inputs[0].shape);
            Ok(vec![grad(needs[0], &mut || vec![g[0] / n as f64; n])])
        }
        Op::Softmax { axis } => {
            let y = out_data;
            Ok(vec![grad(needs[0], &mut || {
                let mut dx = vec![0.0; y.len()];
                for_each_lane(out_shape, *axis, |base, stride, len| {
                    let mut dot = 0.0;
                    for k in 0..len {
                        dot += g[base + k * stride] * y[base + k * stride];
                    }
                    for k in 0..len {
                        let i = base + k * stride;
                        dx[i] = y[i] * (g[i] - dot);
                    }
                });
                dx
            })])
        }
        Op::Concat { axis } => {
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let total_chunk = out_shape[*axis] * inner;
            let mut prefix = 0usize;
            let mut out = Vec::with_capacity(inputs.len());
            for (idx, input) in inputs.iter().enumerate() {
                let chunk = input.shape[*axis] * inner;
                out.push(grad(needs[idx], &mut || {
                    let mut gi = vec![0.0; numel(&input.shape)];
                    for o in 0..outer {
                        gi[o * chunk..(o + 1) * chunk]
                            .copy_from_slice(&g[o * total_chunk + prefix..][..chunk]);
                    }
                    gi
                }));
                prefix += chunk;
            }
            Ok(out)
        }
        Op::Slice { axis, start, len } => {
            let shape = &inputs[0].shape;
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let src_chunk = shape[*axis] * inner;
            let dst_chunk = len * inner;
            Ok(vec![grad(needs[0], &mut || {
                let mut gi = vec![0.0; numel(shape)];
                for o in 0..outer {
                    gi[o * src_chunk + start * inner..][..dst_chunk]
                        .copy_from_slice(&g[o * dst_chunk..(o + 1) * dst_chunk]);
                }
                gi
            })])
        }
        Op::AvgPool2 => {
            let (c, h, w) = (inputs[0].shape[0], inputs[0].shape[1], inputs[0].shape[2]);
            let (ho, wo) = (h / 2, w / 2);
            Ok(vec![grad(needs[0], &mut || {
                let mut gi = vec![0.0; c * h * w];
                for cc in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = 0.25 * g[(cc * ho + i) * wo + j];
                            let base = (cc * h + 2 * i) * w + 2 * j;
                            gi[base] += gv;
                            gi[base + 1] += gv;
                            gi[base + w] += gv;
                            gi[base + w + 1] += gv;
                        }
                    }
                }
                gi
            })])
        }
        Op::UpsampleNearest2 => {
            let (c, h, w) = (inputs[0].shape[0], inputs[0].shape[1], inputs[0].shape[2]);
            let (ho, wo) = (h * 2, w * 2);
            Ok(vec![grad(needs[0], &mut || {
                let mut gi = vec![0.0; c * h * w];
                for cc in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            gi[(cc * h + i / 2) * w + j / 2] += g[(cc * ho + i) * wo + j];
                        }
                    }
                }
                gi
            })])
        }
        Op::Transpose { axes } => {
            let mut inverse = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            Ok(vec![grad(needs[0], &mut || {
                permute(g, out_shape, &inverse)
            })])
        }
        Op::Reshape { .. } => Ok(vec![grad(needs[0], &mut || g.to_vec())]),
    }
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

/// Visits every 1-D lane along `axis` as `(base, stride, len)`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let st = strides(shape);
    let stride = st[axis];
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, stride, len);
        }
    }
}

fn permute(data: &[f64], in_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let n = numel(&out_shape);
    let mut out = vec![0.0; n];
    let mut coords = vec![0usize; out_shape.len()];
    for slot in out.iter_mut() {
        let mut src = 0usize;
        for (i, &c) in coords.iter().enumerate() {
            src += c * in_strides[axes[i]];
        }
        *slot = data[src];
        for d in (0..coords.len()).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

fn gemm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * m..(kk + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `g (n,m) x b^T (m,k) -> (n,k)`
fn gemm_nt(g: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..m {
            let gv = g[i * m + j];
            for kk in 0..k {
                out[i * k + kk] += gv * b[kk * m + j];
            }
        }
    }
    out
}

/// `a^T (k,n) x g (n,m) -> (k,m)`
fn gemm_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        for kk in 0..k {
            let av = a[i * k + kk];
            let grow = &g[i * m..(i + 1) * m];
            let orow = &mut out[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_fwd(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; co * h * w];
    if let Some(b) = bias {
        for o in 0..co {
            out[o * h * w..(o + 1) * h * w].fill(b[o]);
        }
    }
    let (ph, pw) = (kh / 2, kw / 2);
    for o in 0..co {
        for i in 0..ci {
            for r in 0..kh {
                let dy = r as isize - ph as isize;
                let (y0, y1) = valid_range(h, dy);
                for s in 0..kw {
                    let dx = s as isize - pw as isize;
                    let (x0, x1) = valid_range(w, dx);
                    let wv = wt[((o * ci + i) * kh + r) * kw + s];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let xrow = &x[(i * h + iy) * w..][..w];
                        let orow = &mut out[(o * h + y) * w..][..w];
                        for xx in x0..x1 {
                            orow[xx] += wv * xrow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_input(
    g: &[f64],
    co: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    ci: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let mut gi = vec![0.0; ci * h * w];
    let (ph, pw) = (kh / 2, kw / 2);
    for o in 0..co {
        for i in 0..ci {
            for r in 0..kh {
                let dy = r as isize - ph as isize;
                let (y0, y1) = valid_range(h, dy);
                for s in 0..kw {
                    let dx = s as isize - pw as isize;
                    let (x0, x1) = valid_range(w, dx);
                    let wv = wt[((o * ci + i) * kh + r) * kw + s];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &g[(o * h + y) * w..][..w];
                        let irow = &mut gi[(i * h + iy) * w..][..w];
                        for xx in x0..x1 {
                            irow[(xx as isize + dx) as usize] += wv * grow[xx];
                        }
                    }
                }
            }
        }
    }
    gi
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_weight(
    g: &[f64],
    co: usize,
    h: usize,
    w: usize,
    x: &[f64],
    ci: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let mut gw = vec![0.0; co * ci * kh * kw];
    let (ph, pw) = (kh / 2, kw / 2);
    for o in 0..co {
        for i in 0..ci {
            for r in 0..kh {
                let dy = r as isize - ph as isize;
                let (y0, y1) = valid_range(h, dy);
                for s in 0..kw {
                    let dx = s as isize - pw as isize;
                    let (x0, x1) = valid_range(w, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &g[(o * h + y) * w..][..w];
                        let xrow = &x[(i * h + iy) * w..][..w];
                        for xx in x0..x1 {
                            acc += grow[xx] * xrow[(xx as isize + dx) as usize];
                        }
                    }
                    gw[((o * ci + i) * kh + r) * kw + s] = acc;
                }
            }
        }
    }
    gw
}

fn depthwise_fwd(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    if let Some(b) = bias {
        for cc in 0..c {
            out[cc * h * w..(cc + 1) * h * w].fill(b[cc]);
        }
    }
    let (ph, pw) = (kh / 2, kw / 2);
    for cc in 0..c {
        for r in 0..kh {
            let dy = r as isize - ph as isize;
            let (y0, y1) = valid_range(h, dy);
            for s in 0..kw {
                let dx = s as isize - pw as isize;
                let (x0, x1) = valid_range(w, dx);
                let wv = wt[(cc * kh + r) * kw + s];
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let xrow = &x[(cc * h + iy) * w..][..w];
                    let orow = &mut out[(cc * h + y) * w..][..w];
                    for xx in x0..x1 {
                        orow[xx] += wv * xrow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    out
}

fn depthwise_bwd_input(
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let mut gi = vec![0.0; c * h * w];
    let (ph, pw) = (kh / 2, kw / 2);
    for cc in 0..c {
        for r in 0..kh {
            let dy = r as isize - ph as isize;
            let (y0, y1) = valid_range(h, dy);
            for s in 0..kw {
                let dx = s as isize - pw as isize;
                let (x0, x1) = valid_range(w, dx);
                let wv = wt[(cc * kh + r) * kw + s];
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let grow = &g[(cc * h + y) * w..][..w];
                    let irow = &mut gi[(cc * h + iy) * w..][..w];
                    for xx in x0..x1 {
                        irow[(xx as isize + dx) as usize] += wv * grow[xx];
                    }
                }
            }
        }
    }
    gi
}

fn depthwise_bwd_weight(
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    x: &[f64],
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let mut gw = vec![0.0; c * kh * kw];
    let (ph, pw) = (kh / 2, kw / 2);
    for cc in 0..c {
        for r in 0..kh {
            let dy = r as isize - ph as isize;
            let (y0, y1) = valid_range(h, dy);
            for s in 0..kw {
                let dx = s as isize - pw as isize;
                let (x0, x1) = valid_range(w, dx);
                let mut acc = 0.0;
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let grow = &g[(cc * h + y) * w..][..w];
                    let xrow = &x[(cc * h + iy) * w..][..w];
                    for xx in x0..x1 {
                        acc += grow[xx] * xrow[(xx as isize + dx) as usize];
                    }
                }
                gw[(cc * kh + r) * kw + s] = acc;
            }
        }
    }
    gw
}

/// Output positions `y` with `0 <= y + dy < extent`.
fn valid_range(extent: usize, dy: isize) -> (usize, usize) {
    let lo = (-dy).max(0) as usize;
    let hi = (extent as isize - dy).clamp(0, extent as isize) as usize;
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::super::{backward, concat, Tape, Tensor};
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_values() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[6.0, 8.0, 10.0, 12.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-4.0, -4.0, -4.0, -4.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[5.0, 12.0, 21.0, 32.0]);
        assert_eq!(b.div(&a).unwrap().data(), &[5.0, 3.0, 7.0 / 3.0, 2.0]);
    }

    #[test]
    fn div_by_zero_rejected() {
        let a = t(&[2], &[1.0, 1.0]);
        let b = t(&[2], &[1.0, 0.0]);
        assert!(a.div(&b).is_err());
    }

    #[test]
    fn log_rejects_nonpositive() {
        assert!(t(&[1], &[0.0]).log().is_err());
        assert!(t(&[1], &[-1.0]).log().is_err());
        assert!(t(&[1], &[1.0]).log().is_ok());
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t(&[1, 1, 3, 3], &k);
        let y = x.conv2d(&w, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_sum_kernel_zero_pads() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let y = x.conv2d(&w, None).unwrap();
        // Every output is the sum of in-bounds neighbours; borders miss the
        // zero padding.
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn softmax_lanes_sum_to_one() {
        let x = t(&[2, 3], &[0.1, 1.5, -0.7, 3.0, 3.0, 3.0]);
        let y = x.softmax(1).unwrap();
        for row in 0..2 {
            let s: f64 = y.data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((y.data()[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        let back = c.slice(0, 0, 1).unwrap();
        assert_eq!(back.data(), a.data());
        let tail = c.slice(0, 1, 2).unwrap();
        assert_eq!(tail.data(), b.data());
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = t(&[1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let p = x.avgpool2().unwrap();
        assert_eq!(p.shape(), &[1, 2, 2]);
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        let u = p.upsample_nearest2().unwrap();
        assert_eq!(u.shape(), &[1, 4, 4]);
        assert_eq!(u.data()[0], 2.5);
        assert_eq!(u.data()[1], 2.5);
        assert_eq!(u.data()[4], 2.5);
    }

    #[test]
    fn transpose_round_trips() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.transpose(vec![1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = y.transpose(vec![1, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn backward_through_product_chain() {
        // loss = sum(a * b); d/da = b, d/db = a.
        let tape = Tape::new();
        let a = tape
            .watch(&t(&[3], &[1.0, 2.0, 3.0]), "a")
            .unwrap();
        let b = tape
            .watch(&t(&[3], &[4.0, 5.0, 6.0]), "b")
            .unwrap();
        let loss = a.mul(&b).unwrap().sum().unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads["a"].data(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads["b"].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_skips_disconnected_leaves() {
        let tape = Tape::new();
        let a = tape.watch(&t(&[2], &[1.0, 2.0]), "a").unwrap();
        let _b = tape.watch(&t(&[2], &[3.0, 4.0]), "b").unwrap();
        let loss = a.sum().unwrap();
        let grads = backward(&loss).unwrap();
        assert!(grads.contains_key("a"));
        assert!(!grads.contains_key("b"));
    }

    #[test]
    fn tape_consumed_after_backward() {
        let tape = Tape::new();
        let a = tape.watch(&t(&[1], &[2.0]), "a").unwrap();
        let loss = a.mul(&a).unwrap().sum().unwrap();
        backward(&loss).unwrap();
        assert!(tape.is_consumed());
        assert!(a.mul(&a).is_err());
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.watch(&t(&[1], &[1.0]), "a").unwrap();
        let b = t2.watch(&t(&[1], &[1.0]), "b").unwrap();
        assert!(matches!(a.add(&b), Err(TensorError::TapeMismatch)));
    }

    #[test]
    fn constants_do_not_grow_the_tape() {
        let tape = Tape::new();
        let a = tape.watch(&t(&[2], &[1.0, 2.0]), "a").unwrap();
        let c = t(&[2], &[3.0, 4.0]);
        let before = tape.num_nodes();
        let _plain = c.add(&c).unwrap();
        assert_eq!(tape.num_nodes(), before);
        let _rec = a.add(&c).unwrap();
        assert_eq!(tape.num_nodes(), before + 1);
    }
}
