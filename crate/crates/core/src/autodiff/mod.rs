//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and backward is a single reverse sweep. Gradients are stored only on
//! leaves created with `requires_grad = true`; they accumulate across
//! `backward` calls until [`Tape::zero_grads`].
//!
//! Straight-through quantizers plug in through [`CustomGradOp`]: their
//! backward rule is used verbatim, the forward is never differentiated
//! numerically.

mod custom;
mod nn;
mod ops;

pub use custom::{register_custom, CustomGradOp, CustomOpHandle, FnCustomOp};
pub use ops::Op;

use crate::error::{Result, UpqError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: input values, the node's output and the
/// gradient flowing into that output.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub upstream: &'a Tensor,
    /// Per input: whether a gradient is wanted.
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    requires_grad: bool,
    grad: Option<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor to the tape.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            requires_grad,
            grad: None,
            backward: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operation name that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records a computed node. The backward closure is kept only when some
    /// input requires a gradient.
    pub(crate) fn push<F>(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        backward: F,
    ) -> Result<Var>
    where
        F: Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> + 'static,
    {
        value.ensure_finite(op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs,
            requires_grad,
            grad: None,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root. Every reachable leaf with
    /// `requires_grad` receives (accumulates) its gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| UpqError::contract("backward root is not on this tape"))?;
        if !root_node.value.is_scalar() {
            return Err(UpqError::contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                if node.requires_grad {
                    let node = &mut self.nodes[i];
                    match node.grad.as_mut() {
                        Some(g) => g.add_assign(&upstream),
                        None => node.grad = Some(upstream),
                    }
                }
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                upstream: &upstream,
                needs: node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let input_grads = backward(&ctx)?;
            if input_grads.len() != node.inputs.len() {
                return Err(UpqError::contract(format!(
                    "{}: backward returned {} gradients for {} inputs",
                    node.op,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            let inputs = node.inputs.clone();
            let op = node.op;
            for (v, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[v.0].value.shape() {
                    return Err(UpqError::contract(format!(
                        "{op}: gradient shape {:?} does not match input shape {:?}",
                        g.shape(),
                        self.nodes[v.0].value.shape()
                    )));
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[v.0] = Some(g),
                }
            }
        }
        Ok(())
    }
}
