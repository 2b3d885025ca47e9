//! Deep learning of high-dimensional quasi-linear parabolic PDEs through their
//! forward-backward SDE representation.
//!
//! A single network `u(t, x)` supplies `Y = u(t, X)` and `Z = Du(t, X)` along
//! Euler–Maruyama paths of the forward process; training minimizes the
//! squared mismatch of the discretized backward equation plus the terminal
//! condition.
//!
//! - [`ad`]: tensors and the reverse-mode tape
//! - [`net`]: the network and its joint value/gradient forward pass
//! - [`problems`]: FBSDE definitions and the built-in benchmarks
//! - [`path`]: Brownian sampling and rollouts
//! - [`trainer`]: loss, Adam, checkpoints and the training loop
//! - [`evaluation`]: test-path error curves and `Y₀` summaries

pub mod ad;
pub mod error;
pub mod evaluation;
pub mod net;
pub mod path;
pub mod problems;
pub mod rng;
pub mod trainer;

pub use ad::{Activation, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use net::{NetOutput, NetParams, SolutionModel};
pub use problems::ProblemSpec;
