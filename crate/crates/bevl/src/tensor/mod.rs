//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable value types: every operation allocates its output.
//! An operation whose inputs are all plain tensors is evaluated eagerly and
//! returns a plain tensor; as soon as one input is attached to a [`Tape`] the
//! result is recorded so a later [`backward`] pass can propagate gradients to
//! the named leaves. The primitive set is fixed and enumerated by [`Op`];
//! everything else in the crate is composed from it.

mod op;
mod optim;
mod param;
mod tape;

pub use op::{apply, Op};
pub use optim::{adam_step, fd_gradient, sgd_step, AdamConfig, AdamState};
pub use param::{grad_l2_norm, ParamSet, ParamSnapshot, FORMAT_MAGIC, FORMAT_VERSION};
pub use tape::{backward, GradMap, Tape};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub(crate) use tape::NodeRef;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {what}")]
    Invalid { op: &'static str, what: String },
    #[error("{op}: domain error: {what}")]
    Domain { op: &'static str, what: String },
    #[error("tensor shape {0:?} has a zero extent")]
    EmptyShape(Vec<usize>),
    #[error("data length {got} does not match shape {shape:?} ({want} elements)")]
    DataLength {
        shape: Vec<usize>,
        want: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward requires a tape-attached loss")]
    DetachedLoss,
    #[error("tape was already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("operation mixes tensors from different tapes")]
    TapeMismatch,
    #[error("parameter {name}: {what}")]
    Param { name: String, what: String },
    #[error("checkpoint decode error at byte {offset}: {what}")]
    Decode { offset: usize, what: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor of finite f64 values. Extents are all positive.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("attached", &self.node.is_some())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(TensorError::EmptyShape(shape.to_vec()));
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor from raw data, rejecting empty shapes, length
    /// mismatches, and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let want = numel(&shape);
        if data.len() != want {
            return Err(TensorError::DataLength {
                shape,
                want,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    /// Internal constructor for op outputs whose values were already checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        Self { shape, data, node }
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        let n = numel(&shape);
        Ok(Self {
            shape,
            data: Arc::new(vec![0.0; n]),
            node: None,
        })
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        check_shape(&shape)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { index: 0 });
        }
        let n = numel(&shape);
        Ok(Self {
            shape,
            data: Arc::new(vec![value; n]),
            node: None,
        })
    }

    /// Rank-1 tensor of length 1. Scalars in this crate are shape `[1]`.
    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    /// True when the tensor participates in gradient recording.
    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// A detached copy sharing the same storage. Gradients never flow through
    /// the result.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(&Op::Add, &[self, rhs])
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(&Op::Sub, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(&Op::Mul, &[self, rhs])
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(&Op::Div, &[self, rhs])
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(&Op::MatMul, &[self, rhs])
    }

    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        apply(&Op::Conv2d, &inputs)
    }

    pub fn depthwise_conv2d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        apply(&Op::DepthwiseConv2d, &inputs)
    }

    pub fn relu(&self) -> Result<Tensor> {
        apply(&Op::Relu, &[self])
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        apply(&Op::LeakyRelu { slope }, &[self])
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        apply(&Op::Sigmoid, &[self])
    }

    pub fn exp(&self) -> Result<Tensor> {
        apply(&Op::Exp, &[self])
    }

    pub fn log(&self) -> Result<Tensor> {
        apply(&Op::Log, &[self])
    }

    pub fn abs(&self) -> Result<Tensor> {
        apply(&Op::Abs, &[self])
    }

    pub fn powf(&self, exponent: f64) -> Result<Tensor> {
        apply(&Op::Power { exponent }, &[self])
    }

    pub fn sum(&self) -> Result<Tensor> {
        apply(&Op::Sum, &[self])
    }

    pub fn mean(&self) -> Result<Tensor> {
        apply(&Op::Mean, &[self])
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        apply(&Op::Softmax { axis }, &[self])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        apply(&Op::Slice { axis, start, len }, &[self])
    }

    pub fn avgpool2(&self) -> Result<Tensor> {
        apply(&Op::AvgPool2, &[self])
    }

    pub fn upsample_nearest2(&self) -> Result<Tensor> {
        apply(&Op::UpsampleNearest2, &[self])
    }

    pub fn transpose(&self, axes: Vec<usize>) -> Result<Tensor> {
        apply(&Op::Transpose { axes }, &[self])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        apply(&Op::Reshape { shape }, &[self])
    }

    /// Scales by a plain constant; the constant is never differentiated.
    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let c = Tensor::full(self.shape.clone(), factor)?;
        self.mul(&c)
    }
}

/// Concatenates tensors along `axis`. Shapes must agree on every other axis.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    apply(&Op::Concat { axis }, inputs)
}
