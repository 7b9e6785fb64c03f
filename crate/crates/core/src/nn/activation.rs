use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, UnaryKind, Var};
use crate::error::Result;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Nonlinearities addressable by name in plans and configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Silu,
    Gelu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    Softmax { axis: usize },
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl Tape {
    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        Ok(match kind {
            Activation::Silu => self.unary(UnaryKind::Silu, x),
            Activation::Gelu => self.unary(UnaryKind::Gelu, x),
            Activation::LeakyRelu { slope } => self.unary(UnaryKind::LeakyRelu(slope), x),
            Activation::Sigmoid => self.unary(UnaryKind::Sigmoid, x),
            Activation::Softmax { axis } => self.softmax(x, axis)?,
        })
    }
}
