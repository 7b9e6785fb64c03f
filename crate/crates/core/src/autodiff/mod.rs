//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward pass. Every op method evaluates eagerly,
//! appends a node holding its value plus whatever the backward rule needs, and
//! returns a [`Var`] handle. [`Tape::backward`] consumes the tape and sweeps
//! the nodes once in reverse order, producing a [`GradMap`] keyed by the
//! names given to requires-grad leaves.
//!
//! Nodes are appended in evaluation order, so operands always precede their
//! consumers and the reverse sweep is a valid topological order.

mod backward;
mod elementwise;
mod reduce;
mod shape;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use elementwise::{BinaryKind, UnaryKind};
pub(crate) use reduce::softmax_values;

use crate::error::{Error, Result};
use crate::nn::conv::ConvGeom;
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients of a scalar loss keyed by leaf name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }
}

pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    /// Stored in terms of the forward conv whose input-gradient this is:
    /// `geom.input` is the transposed conv's output extent.
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    DwConv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        offset: usize,
    },
    /// Normalization over one axis (layer norm) or over everything but one
    /// axis (batch norm); `xhat`/`rstd` are the saved forward intermediates.
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        across_batch: bool,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Batch norm with frozen statistics.
    NormFrozen {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    SoftmaxXent {
        logits: Var,
        labels: Arc<[usize]>,
        probs: Vec<f64>,
    },
    BoxSums {
        x: Var,
        region_of: Arc<[usize]>,
        regions: usize,
    },
    SelectiveScan {
        inputs: [Var; 6],
        states: Vec<f64>,
    },
}

impl Op {
    fn operands(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Binary { a, b, .. } => vec![*a, *b],
            Unary { x, .. }
            | SumAll(x)
            | SumAxis { x, .. }
            | Reshape(x)
            | Permute { x, .. }
            | Slice { x, .. }
            | Softmax { x, .. }
            | BoxSums { x, .. } => vec![*x],
            SoftmaxXent { logits, .. } => vec![*logits],
            Concat { parts, .. } => parts.clone(),
            Conv3d { x, w, b, .. } | ConvTranspose3d { x, w, b, .. } | DwConv1d { x, w, b, .. } | Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Norm { x, gamma, beta, .. } | NormFrozen { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            SelectiveScan { inputs, .. } => inputs.to_vec(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, Var>,
    pub(crate) scan_mode: ScanMode,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_scan_mode(scan_mode: ScanMode) -> Self {
        Self {
            scan_mode,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Named requires-grad leaf. Names are unique per tape.
    pub fn var(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.leaves.contains_key(name) {
            return Err(Error::contract(format!("leaf `{name}` registered twice")));
        }
        let v = self.push(value, Op::Leaf, true);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Var registered under `name`, if any.
    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(op.operands().iter().all(|o| o.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a non-leaf node; it requires grad iff any operand does.
    pub(crate) fn record(&mut self, value: Tensor, op: Op) -> Var {
        let rg = op.operands().iter().any(|o| self.nodes[o.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar `loss`. Every named leaf gets exactly one
    /// entry; leaves the loss does not depend on get zeros.
    pub fn backward(self, loss: Var) -> Result<GradMap> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads = backward::sweep(&self.nodes, loss);
        let grads = self
            .leaves
            .iter()
            .map(|(name, v)| {
                let value = &self.nodes[v.0].value;
                let g = match grads[v.0].take() {
                    Some(g) => Tensor::from_raw(value.shape().to_vec(), g),
                    None => Tensor::zeros_like(value),
                };
                (name.clone(), g)
            })
            .collect();
        Ok(GradMap { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let mut t = Tape::new();
        let x = t.var("x", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut t = Tape::new();
        t.var("x", Tensor::ones(&[4])).unwrap();
        let c = t.constant(Tensor::scalar(3.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.var("x", Tensor::ones(&[2])).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_leaf_rejected() {
        let mut t = Tape::new();
        t.var("w", Tensor::ones(&[1])).unwrap();
        assert!(t.var("w", Tensor::ones(&[1])).is_err());
    }

    #[test]
    fn shared_operand_accumulates() {
        // loss = sum(x + x) → grad 2
        let mut t = Tape::new();
        let x = t.var("x", Tensor::ones(&[3])).unwrap();
        let y = t.add(x, x).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2.0; 3]);
    }
}
