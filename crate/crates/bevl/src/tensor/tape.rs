//! Wengert-list recording and the reverse sweep.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use super::op::{backward_op, Op};
use super::{Result, Tensor, TensorError};

/// Gradients keyed by leaf name, in name order.
pub type GradMap = BTreeMap<String, Tensor>;

/// Append-only record of one forward pass. A tape is consumed by the first
/// [`backward`] call; recording on a consumed tape is an error. Recording
/// serializes on an internal lock, so attached tensors may move between
/// threads, though a single forward pass gains nothing from doing so.
#[derive(Clone)]
pub struct Tape {
    inner: Arc<Mutex<TapeInner>>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

pub(crate) struct NodeInput {
    /// `None` for constant inputs; gradients stop there.
    pub id: Option<usize>,
    pub data: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
}

enum Node {
    Leaf {
        name: Option<String>,
        shape: Vec<usize>,
    },
    Op {
        op: Op,
        inputs: Vec<NodeInput>,
        out_data: Arc<Vec<f64>>,
        out_shape: Vec<usize>,
    },
}

struct TapeInner {
    nodes: Vec<Node>,
    leaf_names: BTreeMap<String, usize>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(Mutex::new(TapeInner {
                nodes: Vec::new(),
                leaf_names: BTreeMap::new(),
                consumed: false,
            })),
        }
    }

    pub(crate) fn ptr_eq(a: &Tape, b: &Tape) -> bool {
        Arc::ptr_eq(&a.inner, &b.inner)
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.lock().expect("tape lock").consumed
    }

    /// Number of recorded nodes, leaves included.
    pub fn num_nodes(&self) -> usize {
        self.inner.lock().expect("tape lock").nodes.len()
    }

    /// Attaches `t` as a named leaf. The returned tensor shares storage with
    /// `t`; gradients for it appear in the backward result under `name`.
    /// Names must be unique per tape.
    pub fn watch(&self, t: &Tensor, name: &str) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("tape lock");
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if inner.leaf_names.contains_key(name) {
            return Err(TensorError::Param {
                name: name.to_string(),
                what: "duplicate leaf name on tape".to_string(),
            });
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node::Leaf {
            name: Some(name.to_string()),
            shape: t.shape().to_vec(),
        });
        inner.leaf_names.insert(name.to_string(), id);
        Ok(Tensor::from_parts(
            t.shape().to_vec(),
            t.data_arc(),
            Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        ))
    }

    pub(crate) fn record(
        &self,
        op: Op,
        inputs: &[&Tensor],
        out_shape: Vec<usize>,
        out_data: Arc<Vec<f64>>,
    ) -> Result<NodeRef> {
        let mut inner = self.inner.lock().expect("tape lock");
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let id = inner.nodes.len();
        let inputs = inputs
            .iter()
            .map(|t| NodeInput {
                id: t.node().map(|n| n.id),
                data: t.data_arc(),
                shape: t.shape().to_vec(),
            })
            .collect();
        inner.nodes.push(Node::Op {
            op,
            inputs,
            out_data,
            out_shape,
        });
        Ok(NodeRef {
            tape: self.clone(),
            id,
        })
    }
}

/// Finds the unique tape among `inputs`, if any. Mixing tapes is an error.
pub(crate) fn common_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some(node) = t.node() {
            match &found {
                None => found = Some(node.tape.clone()),
                Some(tape) => {
                    if !Tape::ptr_eq(tape, &node.tape) {
                        return Err(TensorError::TapeMismatch);
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Reverse sweep from a scalar loss. Returns gradients for every named leaf
/// the loss depends on; leaves with no path to the loss are absent. The
/// loss's tape is consumed and its node storage released.
pub fn backward(loss: &Tensor) -> Result<GradMap> {
    let node = loss.node().ok_or(TensorError::DetachedLoss)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    let tape = node.tape.clone();
    let loss_id = node.id;
    let mut inner = tape.inner.lock().expect("tape lock");
    if inner.consumed {
        return Err(TensorError::TapeConsumed);
    }

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
    grads[loss_id] = Some(vec![1.0]);

    let mut out = GradMap::new();
    for id in (0..=loss_id).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        match &inner.nodes[id] {
            Node::Leaf { name, shape } => {
                if let Some(name) = name {
                    let t = Tensor::from_parts(shape.clone(), Arc::new(g), None);
                    out.insert(name.clone(), t);
                }
            }
            Node::Op {
                op,
                inputs,
                out_data,
                out_shape,
            } => {
                let needs: Vec<bool> = inputs.iter().map(|i| i.id.is_some()).collect();
                let input_grads = backward_op(op, inputs, out_data, out_shape, &g, &needs)?;
                for (input, gi) in inputs.iter().zip(input_grads) {
                    let (Some(iid), Some(gi)) = (input.id, gi) else {
                        continue;
                    };
                    match &mut grads[iid] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&gi) {
                                *a += b;
                            }
                        }
                        None => grads[iid] = Some(gi),
                    }
                }
            }
        }
    }

    inner.consumed = true;
    inner.nodes = Vec::new();
    inner.leaf_names = BTreeMap::new();
    Ok(out)
}
