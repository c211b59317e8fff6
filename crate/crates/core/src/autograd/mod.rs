//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive evaluates eagerly, stores its output on the [`Tape`] and,
//! when any input is tracked, a backward closure that maps the output
//! gradient to input gradients. [`Tape::backward`] sweeps the records in
//! reverse insertion order, which is a valid reverse topological order
//! because a record can only reference earlier records.
//!
//! ```
//! use hypervision::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod activation;
mod conv;
mod norm;
mod pool;
mod structural;

pub use conv::Padding;
pub use norm::{BatchNormConfig, RunningStats};
pub use pool::PoolKind;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Train/eval switch for batch-norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local derivative of one primitive.
///
/// `inputs` and `output` are the forward values; `needs[i]` tells whether
/// input `i` is tracked. The returned vector has one entry per input; entries
/// for untracked inputs may be `None`.
pub(crate) trait BackwardOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn BackwardOp>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every record so the tape can be reused for a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(Node {
            value: tensor,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        })
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    pub(crate) fn record(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        op: Box<dyn BackwardOp>,
    ) -> Result<Var> {
        self.check_open()?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            inputs,
            op: requires_grad.then_some(op),
            requires_grad,
        }))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Gradients of a value consumed several times are summed. The tape must
    /// be [`reset`](Tape::reset) before it records again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_open()?;
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss_node.value.shape()),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !loss_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[idx].as_ref() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, grad, &needs)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((var, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[var.0].value.shape(), "{}", op.name());
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let data = vec![0.5, -1.5, 2.0];
        let x = tape.param(Tensor::new(&[3], data.clone()).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn branches_accumulate() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[1, 1, 2, 2], vec![-1.0, 0.5, 2.0, -0.3]).unwrap());
        let a = tape.elu(x, 1.0).unwrap();
        let b = tape.sigmoid(x).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let both = tape.backward(loss).unwrap().take(x).unwrap();

        let single = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::new(&[1, 1, 2, 2], vec![-1.0, 0.5, 2.0, -0.3]).unwrap());
            let y = if which == 0 { tape.elu(x, 1.0).unwrap() } else { tape.sigmoid(x).unwrap() };
            let loss = tape.sum(y).unwrap();
            tape.backward(loss).unwrap().take(x).unwrap()
        };
        let (ga, gb) = (single(0), single(1));
        for i in 0..4 {
            assert_eq!(both.data()[i], ga.data()[i] + gb.data()[i]);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn tape_requires_reset_after_backward() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[1]));
        let y = tape.sum(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.sum(x), Err(Error::TapeConsumed)));
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
        tape.reset();
        let x = tape.param(Tensor::ones(&[1]));
        let y = tape.sum(x).unwrap();
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.get(c).is_none());
    }
}
