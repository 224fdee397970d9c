//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its value and whatever the
//! backward rule needs. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and [`Tape::backward`]
//! walks it once in reverse. Gradient contributions into a shared input
//! are accumulated in that fixed order, which keeps results bit-identical
//! across runs.

mod conv;
mod ops;

pub use conv::{output_extent as conv_output_extent, ConvGeometry};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Concat0 {
        parts: Vec<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    RowNormalize {
        x: Var,
        norms: Vec<T>,
    },
    L1 {
        x: Var,
    },
    Sum {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that keeps what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape for evaluation: nothing requires gradients and no backward
    /// state is saved.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a learnable input. Ignored for gradients on an inference tape.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        let requires_grad = self.recording;
        self.leaf(value, requires_grad)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d(loss)/d(node) back to every gradient-requiring leaf.
    /// Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let Tape { nodes, recording } = self;
        if !recording {
            return Err(Error::shape("backward", "inference tape has no gradient state"));
        }
        let loss_node = &nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            ops::backward_node(&nodes, node, &g, &mut grads)?;
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Gradients of the leaves reachable from the loss.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

pub(crate) fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    var: Var,
    contribution: Vec<T>,
) {
    if !nodes[var.0].requires_grad {
        return;
    }
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn l1_gradient_is_sign() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[1.5, -2.0, 3.0, -0.25])).unwrap();
        let loss = tape.l1_norm(w).unwrap();
        assert_eq!(tape.value(loss).data(), &[6.75]);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // loss = sum(w) + sum(3w) → d/dw = 4
        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let a = tape.sum(w).unwrap();
        let s = tape.scale(w, 3.0).unwrap();
        let b = tape.sum(s).unwrap();
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let c = tape.constant(t(&[2], &[5.0, 5.0])).unwrap();
        let s = tape.add(w, c).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let unused = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::<f64>::inference();
        let w = tape.param(t(&[1], &[1.0])).unwrap();
        assert!(!tape.requires_grad(w));
        let loss = tape.sum(w).unwrap();
        assert!(tape.backward(loss).is_err());
    }
}
