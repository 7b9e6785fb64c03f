use serde::{Deserialize, Serialize};

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Square,
    Softplus,
    Sigmoid,
    Silu,
    /// tanh approximation.
    Gelu,
    LeakyRelu(f64),
    /// `mul·x + add`
    Affine { mul: f64, add: f64 },
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl UnaryKind {
    pub fn apply(self, x: f64) -> f64 {
        use UnaryKind::*;
        match self {
            Neg => -x,
            Exp => x.exp(),
            Ln => x.ln(),
            Square => x * x,
            Softplus => softplus(x),
            Sigmoid => sigmoid(x),
            Silu => x * sigmoid(x),
            Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Affine { mul, add } => mul * x + add,
        }
    }

    /// d(apply)/dx given input `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        use UnaryKind::*;
        match self {
            Neg => -1.0,
            Exp => y,
            Ln => 1.0 / x,
            Square => 2.0 * x,
            Softplus => sigmoid(x),
            Sigmoid => y * (1.0 - y),
            Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Affine { mul, .. } => mul,
        }
    }
}

/// Elementwise kinds addressable through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Binary(BinaryKind),
    Unary(UnaryKind),
}

fn binary_apply(kind: BinaryKind, a: f64, b: f64) -> f64 {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
    }
}

impl Tape {
    /// Binary op with trailing-dimension broadcasting (see
    /// [`broadcast_shape`]).
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(av.shape(), bv.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let (la, lb) = (ad.len(), bd.len());
        let out: Vec<f64> = if la == n && lb == n {
            ad.iter().zip(bd).map(|(&x, &y)| binary_apply(kind, x, y)).collect()
        } else {
            (0..n).map(|i| binary_apply(kind, ad[i % la], bd[i % lb])).collect()
        };
        if kind == BinaryKind::Div && bd.iter().any(|&v| v == 0.0) {
            return Err(Error::contract("division by zero"));
        }
        Ok(self.record(Tensor::from_raw(shape, out), Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.record(value, Op::Unary { kind, x })
    }

    /// Single entry point over all elementwise kinds; binary kinds require `b`.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::Binary(k), Some(b)) => self.binary(k, a, b),
            (ElementwiseKind::Unary(k), None) => Ok(self.unary(k, a)),
            (ElementwiseKind::Binary(_), None) => Err(Error::contract("binary op needs two operands")),
            (ElementwiseKind::Unary(_), Some(_)) => Err(Error::contract("unary op takes one operand")),
        }
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("ln of non-positive value"));
        }
        Ok(self.unary(UnaryKind::Ln, x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(UnaryKind::Affine { mul: factor, add: 0.0 }, x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Affine { mul: 1.0, add: c }, x)
    }

    /// `1 − x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Affine { mul: -1.0, add: 1.0 }, x)
    }
}

/// Sums a full-size gradient down onto a (possibly broadcast) operand.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

pub(super) fn binary_backward(kind: BinaryKind, a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = g.len();
    let (ad, bd) = (a.data(), b.data());
    let (la, lb) = (ad.len(), bd.len());
    let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
        BinaryKind::Add => (g.to_vec(), g.to_vec()),
        BinaryKind::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
        BinaryKind::Mul => (
            (0..n).map(|i| g[i] * bd[i % lb]).collect(),
            (0..n).map(|i| g[i] * ad[i % la]).collect(),
        ),
        BinaryKind::Div => (
            (0..n).map(|i| g[i] / bd[i % lb]).collect(),
            (0..n)
                .map(|i| {
                    let bv = bd[i % lb];
                    -g[i] * ad[i % la] / (bv * bv)
                })
                .collect(),
        ),
    };
    (reduce_to(&ga, la), reduce_to(&gb, lb))
}

pub(super) fn unary_backward(kind: UnaryKind, x: &Tensor, y: &Tensor, g: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(y.data())
        .zip(g)
        .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
        .collect()
}
