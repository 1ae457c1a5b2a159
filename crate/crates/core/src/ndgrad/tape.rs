use std::borrow::Cow;
use std::cell::Cell;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

thread_local! {
    static FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Scale applied to gradients leaving a faulted op.
pub const FAULT_SCALE: f64 = 1.5;

/// While alive, every backward rule of the named op on this thread returns
/// gradients scaled by [`FAULT_SCALE`]. Used to self-test the gradient checker.
pub struct FaultGuard {
    previous: Option<&'static str>,
}

pub fn corrupt_backward(op: &'static str) -> FaultGuard {
    FaultGuard {
        previous: FAULT.with(|f| f.replace(Some(op))),
    }
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        FAULT.with(|f| f.set(self.previous));
    }
}

/// What a backward rule sees for one recorded op.
pub struct BackwardCtx<'a> {
    pub grad_out: &'a Matrix,
    pub inputs: &'a [&'a Matrix],
    pub output: &'a Matrix,
    /// `needs[k]` is false when input `k` does not require a gradient; rules may skip it.
    pub needs: &'a [bool],
}

/// Returns one gradient per input, `None` where the input needs none.
pub type BackwardFn<'p> = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Matrix>> + 'p>;

struct Node<'p> {
    name: &'static str,
    value: Cow<'p, Matrix>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<'p>>,
}

/// Define-by-run tape. Values are computed eagerly as ops are recorded;
/// [`Tape::backward`] walks the record once in reverse.
///
/// Parameters are borrowed for `'p`, so the tape must be dropped before the
/// optimizer mutates them.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Cow<'p, Matrix>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            name: "leaf",
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, value: &'p Matrix) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Trainable leaf owning its value.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'p Matrix) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// Accumulated gradient after [`Tape::backward`]; `None` for values the
    /// loss does not depend on through differentiable paths.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Records an op whose forward value was computed by the caller.
    ///
    /// The backward rule is dropped when no input requires a gradient.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Matrix,
        backward: BackwardFn<'p>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            name,
            value: Cow::Owned(value),
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a 1x1 loss. Allowed once per recorded forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let (rows, cols) = self.nodes[loss.0].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Matrix::scalar(1.0));
        let fault = FAULT.with(|f| f.get());

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = self.grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Matrix> = node
                .inputs
                .iter()
                .map(|&i| &*self.nodes[i].value)
                .collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                grad_out: &grad_out,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let mut input_grads = rule(&ctx);
            if fault == Some(node.name) {
                input_grads.iter_mut().flatten().for_each(|g| g.scale_assign(FAULT_SCALE));
            }
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.name);
            let name = node.name;
            let input_ids = node.inputs.clone();
            self.grads[id] = Some(grad_out);
            for (k, g) in input_grads.into_iter().enumerate() {
                let Some(g) = g else { continue };
                let target = input_ids[k];
                if !self.nodes[target].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[target].value.shape() {
                    return Err(Error::dim(
                        name,
                        format!(
                            "backward produced {:?} for an input of shape {:?}",
                            g.shape(),
                            self.nodes[target].value.shape()
                        ),
                    ));
                }
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient from {name}")));
                }
                match &mut self.grads[target] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
