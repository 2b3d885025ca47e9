//! Dense `f64` tensors and a first-order reverse-mode tape.
//!
//! Every tape operation computes its value eagerly and, when at least one input
//! depends on a trainable leaf, records enough to run the chain rule backwards.
//! Nodes only ever reference earlier nodes, so a single reverse pass over node
//! ids is a valid topological sweep.

mod tape;
mod tensor;

use std::fmt;
use std::str::FromStr;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Error;

/// Elementwise nonlinearity used by the hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Sine,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Sine => v.sin(),
        }
    }

    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Sine => v.cos(),
        }
    }

    pub fn second_derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Sine => -v.sin(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sine => "sine",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sine" | "sin" => Ok(Activation::Sine),
            other => Err(Error::Config(format!(
                "unknown activation '{other}' (expected tanh or sine)"
            ))),
        }
    }
}
