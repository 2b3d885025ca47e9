//! Coupled FBSDE instances
//!
//! ```text
//! dX = μ(t, X, Y, Z) dt + σ(t, X, Y) dW,     X_0 = ξ
//! dY = φ(t, X, Y, Z) dt + Z'σ(t, X, Y) dW,   Y_T = g(X_T)
//! ```
//!
//! Coefficients are written against the tape so that, in the coupled case,
//! parameter gradients flow through the forward recursion. The diffusion is
//! supplied as the action `ΔW ↦ σ ΔW` on a batch; the per-sample matrices are
//! recovered by probing with unit vectors when needed.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::ad::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// `(tape, t, X, Y, Z) → M×d` drift.
pub type DriftFn = Arc<dyn Fn(&Tape, f64, Var, Var, Var) -> Result<Var> + Send + Sync>;
/// `(tape, t, X, Y, ΔW) → M×d` product `σ(t, X, Y) ΔW`.
pub type DiffusionFn = Arc<dyn Fn(&Tape, f64, Var, Var, Var) -> Result<Var> + Send + Sync>;
/// `(tape, t, X, Y, Z) → M×1` generator.
pub type GeneratorFn = Arc<dyn Fn(&Tape, f64, Var, Var, Var) -> Result<Var> + Send + Sync>;
/// `(tape, X) → M×1` terminal condition.
pub type TerminalFn = Arc<dyn Fn(&Tape, Var) -> Result<Var> + Send + Sync>;

pub type ClosedFormFn = Arc<dyn Fn(f64, &Tensor) -> Result<Tensor> + Send + Sync>;
pub type MonteCarloFn = Arc<dyn Fn(f64, &Tensor, usize, u64) -> Result<McEstimate> + Send + Sync>;

pub const BSB_SIGMA: f64 = 0.4;
pub const BSB_RATE: f64 = 0.05;
pub const BSB_HORIZON: f64 = 1.0;
pub const HJB_HORIZON: f64 = 1.0;
pub const AC_HORIZON: f64 = 0.3;
/// Published reference value of `u(0, 0)` for the 20-dimensional Allen-Cahn problem.
pub const AC_REFERENCE_Y0: f64 = 0.30879;

/// Monte-Carlo estimate with per-row standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub value: Tensor,
    pub stderr: Tensor,
}

/// Ground truth available for a problem.
#[derive(Clone)]
pub enum ExactSolution {
    None,
    ClosedForm(ClosedFormFn),
    /// Needs a sample count and a seed; carries standard errors.
    MonteCarlo(MonteCarloFn),
}

/// Exact values plus, for sampled oracles, their standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactValues {
    pub value: Tensor,
    pub stderr: Option<Tensor>,
}

#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    dim: usize,
    horizon: f64,
    xi: Tensor,
    drift: Option<DriftFn>,
    diffusion: Option<DiffusionFn>,
    generator: Option<GeneratorFn>,
    terminal: Option<TerminalFn>,
    exact: ExactSolution,
    reference_y0: Option<f64>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("xi", &self.xi)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    /// A problem with zero coefficients and zero terminal condition; fill in
    /// the pieces with the `with_*` builders.
    pub fn new(name: impl Into<String>, xi: Vec<f64>, horizon: f64) -> Result<Self> {
        let dim = xi.len();
        if dim == 0 {
            return Err(Error::Config("state dimension must be >= 1".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(ProblemSpec {
            name: name.into(),
            dim,
            horizon,
            xi: Tensor::from_vec(1, dim, xi)?,
            drift: None,
            diffusion: None,
            generator: None,
            terminal: None,
            exact: ExactSolution::None,
            reference_y0: None,
        })
    }

    pub fn with_drift(
        mut self,
        f: impl Fn(&Tape, f64, Var, Var, Var) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn with_diffusion(
        mut self,
        f: impl Fn(&Tape, f64, Var, Var, Var) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Some(Arc::new(f));
        self
    }

    pub fn with_generator(
        mut self,
        f: impl Fn(&Tape, f64, Var, Var, Var) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        self.generator = Some(Arc::new(f));
        self
    }

    pub fn with_terminal(
        mut self,
        f: impl Fn(&Tape, Var) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        self.terminal = Some(Arc::new(f));
        self
    }

    pub fn with_exact(mut self, exact: ExactSolution) -> Self {
        self.exact = exact;
        self
    }

    /// Known `u(0, ξ)` for problems without a pointwise oracle.
    pub fn with_reference_y0(mut self, y0: f64) -> Self {
        self.reference_y0 = Some(y0);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn xi(&self) -> &Tensor {
        &self.xi
    }

    pub fn exact(&self) -> &ExactSolution {
        &self.exact
    }

    pub fn has_exact(&self) -> bool {
        !matches!(self.exact, ExactSolution::None)
    }

    pub fn reference_y0(&self) -> Option<f64> {
        self.reference_y0
    }

    /// `μ(t, X, Y, Z)`, or `None` when the drift is identically zero.
    pub fn drift(&self, tape: &Tape, t: f64, x: Var, y: Var, z: Var) -> Result<Option<Var>> {
        self.drift.as_ref().map(|f| f(tape, t, x, y, z)).transpose()
    }

    /// `σ(t, X, Y) ΔW`, or `None` when the diffusion is identically zero.
    pub fn diffusion(&self, tape: &Tape, t: f64, x: Var, y: Var, dw: Var) -> Result<Option<Var>> {
        self.diffusion
            .as_ref()
            .map(|f| f(tape, t, x, y, dw))
            .transpose()
    }

    /// `φ(t, X, Y, Z)` as an M×1 column.
    pub fn generator(&self, tape: &Tape, t: f64, x: Var, y: Var, z: Var) -> Result<Var> {
        match &self.generator {
            Some(f) => f(tape, t, x, y, z),
            None => Ok(tape.constant(Tensor::zeros(tape.shape(x).0, 1))),
        }
    }

    /// `g(X)` as an M×1 column.
    pub fn terminal(&self, tape: &Tape, x: Var) -> Result<Var> {
        match &self.terminal {
            Some(f) => f(tape, x),
            None => Ok(tape.constant(Tensor::zeros(tape.shape(x).0, 1))),
        }
    }

    pub fn terminal_values(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let g = self.terminal(&tape, tape.constant(x.clone()))?;
        let out = tape.value(g).clone();
        Ok(out)
    }

    pub fn generator_values(&self, t: f64, x: &Tensor, y: &Tensor, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let (x, y, z) = (
            tape.constant(x.clone()),
            tape.constant(y.clone()),
            tape.constant(z.clone()),
        );
        let phi = self.generator(&tape, t, x, y, z)?;
        let out = tape.value(phi).clone();
        Ok(out)
    }

    /// Per-sample diffusion matrices `σ(t, X_m, Y_m)`, one d×d tensor per row.
    pub fn sigma_matrices(&self, t: f64, x: &Tensor, y: &Tensor) -> Result<Vec<Tensor>> {
        let (rows, d) = x.shape();
        let mut out = vec![Tensor::zeros(d, d); rows];
        let Some(_) = &self.diffusion else {
            return Ok(out);
        };
        let tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        for j in 0..d {
            let mut probe = Tensor::zeros(rows, d);
            for r in 0..rows {
                probe.set(r, j, 1.0);
            }
            let column = self
                .diffusion(&tape, t, xv, yv, tape.constant(probe))?
                .expect("diffusion present");
            let column = tape.value(column);
            for (r, sigma) in out.iter_mut().enumerate() {
                for i in 0..d {
                    sigma.set(i, j, column.get(r, i));
                }
            }
        }
        Ok(out)
    }

    /// Exact solution at `(t, x_m)` for every row. `samples` and `seed` only
    /// matter for Monte-Carlo oracles.
    pub fn exact_values(
        &self,
        t: f64,
        x: &Tensor,
        samples: usize,
        seed: u64,
    ) -> Result<ExactValues> {
        match &self.exact {
            ExactSolution::None => Err(Error::MissingOracle(self.name.clone())),
            ExactSolution::ClosedForm(f) => Ok(ExactValues {
                value: f(t, x)?,
                stderr: None,
            }),
            ExactSolution::MonteCarlo(f) => {
                let est = f(t, x, samples, seed)?;
                Ok(ExactValues {
                    value: est.value,
                    stderr: Some(est.stderr),
                })
            }
        }
    }
}

fn check_time(t: f64, horizon: f64) -> Result<()> {
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, {horizon}]")));
    }
    Ok(())
}

fn squared_norm(tape: &Tape, x: Var) -> Result<Var> {
    tape.dot_rows(x, x)
}

/// Black-Scholes-Barenblatt: `σ(t,X,Y) = 0.4·diag(X)`, `φ = r(Y − Z'X)`, `g(x) = ‖x‖²`,
/// `ξ = (1, 0.5, 1, 0.5, …)`, `T = 1`.
pub fn make_bsb(d: usize) -> Result<ProblemSpec> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "bsb needs an even dimension, got {d}"
        )));
    }
    let xi = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { 0.5 }).collect();
    Ok(ProblemSpec::new("bsb", xi, BSB_HORIZON)?
        .with_diffusion(|tape, _t, x, _y, dw| tape.scale(tape.mul(x, dw)?, BSB_SIGMA))
        .with_generator(|tape, _t, x, y, z| {
            let zx = tape.dot_rows(z, x)?;
            tape.scale(tape.sub(y, zx)?, BSB_RATE)
        })
        .with_terminal(squared_norm)
        .with_exact(ExactSolution::ClosedForm(Arc::new(bsb_exact))))
}

/// `u(t, x) = exp((r + σ²)(T − t)) ‖x‖²`.
pub fn bsb_exact(t: f64, x: &Tensor) -> Result<Tensor> {
    check_time(t, BSB_HORIZON)?;
    let factor = ((BSB_RATE + BSB_SIGMA * BSB_SIGMA) * (BSB_HORIZON - t)).exp();
    let norms = x.mul(x)?.sum_cols();
    Ok(if t == BSB_HORIZON {
        norms
    } else {
        norms.scale(factor)
    })
}

fn hjb_terminal_scalar(x: &[f64]) -> f64 {
    (0.5 * (1.0 + x.iter().map(|v| v * v).sum::<f64>())).ln()
}

/// Hamilton-Jacobi-Bellman: `σ = √2·I`, `φ = ‖Z‖²`, `g(x) = ln(0.5(1 + ‖x‖²))`, `ξ = 0`, `T = 1`.
pub fn make_hjb(d: usize) -> Result<ProblemSpec> {
    if d == 0 {
        return Err(Error::Config("hjb needs d >= 1".into()));
    }
    Ok(ProblemSpec::new("hjb", vec![0.0; d], HJB_HORIZON)?
        .with_diffusion(|tape, _t, _x, _y, dw| tape.scale(dw, std::f64::consts::SQRT_2))
        .with_generator(|tape, _t, _x, _y, z| squared_norm(tape, z))
        .with_terminal(|tape, x| {
            let s = squared_norm(tape, x)?;
            tape.ln(tape.add_scalar(tape.scale(s, 0.5)?, 0.5)?)
        })
        .with_exact(ExactSolution::MonteCarlo(Arc::new(hjb_exact_mc))))
}

/// Sampled `u(t, x) = −ln E[exp(−g(x + √2·W_{T−t}))]` for the HJB problem.
pub fn hjb_exact_mc(t: f64, x: &Tensor, samples: usize, seed: u64) -> Result<McEstimate> {
    log_expectation_mc(HJB_HORIZON, t, x, samples, seed, hjb_terminal_scalar)
}

/// `−ln E[exp(−g(x + √2·W_{T−t}))]` by plain Monte Carlo, one independent
/// stream per row keyed by `(seed, row)`. Standard errors use the delta
/// method: `sd(e^{−g}) / (√n · mean(e^{−g}))`.
pub fn log_expectation_mc(
    horizon: f64,
    t: f64,
    x: &Tensor,
    samples: usize,
    seed: u64,
    g: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<McEstimate> {
    check_time(t, horizon)?;
    if samples == 0 {
        return Err(Error::Config(
            "Monte-Carlo oracle needs at least one sample".into(),
        ));
    }
    let (rows, d) = x.shape();
    let std = std::f64::consts::SQRT_2 * (horizon - t).sqrt();
    let results: Vec<(f64, f64)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let base = x.row(r);
            if t == horizon {
                return (g(base), 0.0);
            }
            let mut rng = rng::stream(&[seed, r as u64]);
            let mut point = vec![0.0; d];
            let mut noise = vec![0.0; d];
            // Welford on w = exp(−g)
            let (mut mean, mut m2) = (0.0f64, 0.0f64);
            for k in 0..samples {
                rng::fill_normal(&mut rng, std, &mut noise);
                for ((p, b), n) in point.iter_mut().zip(base).zip(&noise) {
                    *p = b + n;
                }
                let w = (-g(&point)).exp();
                let delta = w - mean;
                mean += delta / (k + 1) as f64;
                m2 += delta * (w - mean);
            }
            let var = if samples > 1 {
                m2 / (samples - 1) as f64
            } else {
                0.0
            };
            let se = var.sqrt() / ((samples as f64).sqrt() * mean);
            (-mean.ln(), se)
        })
        .collect();
    let (value, stderr): (Vec<f64>, Vec<f64>) = results.into_iter().unzip();
    Ok(McEstimate {
        value: Tensor::from_vec(rows, 1, value)?,
        stderr: Tensor::from_vec(rows, 1, stderr)?,
    })
}

/// Allen-Cahn: `σ = I`, `φ = −Y + Y³`, `g(x) = 1 / (2 + 0.4‖x‖²)`, `ξ = 0`, `T = 0.3`.
pub fn make_ac(d: usize) -> Result<ProblemSpec> {
    if d == 0 {
        return Err(Error::Config("ac needs d >= 1".into()));
    }
    Ok(ProblemSpec::new("ac", vec![0.0; d], AC_HORIZON)?
        .with_diffusion(|_tape, _t, _x, _y, dw| Ok(dw))
        .with_generator(|tape, _t, _x, y, _z| {
            let cube = tape.mul(tape.square(y)?, y)?;
            tape.sub(cube, y)
        })
        .with_terminal(|tape, x| {
            let s = squared_norm(tape, x)?;
            tape.recip(tape.add_scalar(tape.scale(s, 0.4)?, 2.0)?)
        })
        .with_reference_y0(AC_REFERENCE_Y0))
}

pub const PROBLEM_NAMES: [&str; 3] = ["bsb", "hjb", "ac"];

pub fn by_name(name: &str, d: usize) -> Result<ProblemSpec> {
    match name {
        "bsb" => make_bsb(d),
        "hjb" => make_hjb(d),
        "ac" => make_ac(d),
        other => Err(Error::Config(format!(
            "unknown problem '{other}' (expected one of {})",
            PROBLEM_NAMES.join(", ")
        ))),
    }
}
