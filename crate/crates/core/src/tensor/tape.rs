use crate::error::{Error, Result};

use super::{Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees when the tape replays a node.
pub struct BackwardArgs<'a, F> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<F>,
    pub inputs: Vec<&'a Tensor<F>>,
    pub output: &'a Tensor<F>,
    /// Whether each input wants a gradient; `None` may be returned otherwise.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation.
pub type BackwardFn<F> = Box<dyn Fn(&BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> + Send + Sync>;

struct Node<F> {
    op: &'static str,
    value: Tensor<F>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep. Gradients reach leaves only; they
/// accumulate across repeated [`Tape::backward`] calls until
/// [`Tape::zero_grad`].
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    leaf_grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push_node("leaf", value, Vec::new(), None, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.leaf_grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Record an operation. The node requires a gradient iff any input does;
    /// otherwise the backward closure is dropped immediately.
    pub fn push_op(&mut self, op: &'static str, value: Tensor<F>, inputs: &[Var], backward: BackwardFn<F>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.push_node(op, value, inputs.to_vec(), backward, requires_grad)
    }

    fn push_node(&mut self, op: &'static str, value: Tensor<F>, inputs: Vec<Var>, backward: Option<BackwardFn<F>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            inputs,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss, accumulating leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            };
            let args = BackwardArgs {
                grad: &g,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "backward arity of {}", node.op);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[input.0].value.shape(), "gradient shape of {}", node.op);
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }
}
