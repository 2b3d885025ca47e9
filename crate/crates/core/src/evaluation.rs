//! Post-training assessment on fresh test paths.
//!
//! Relative error at path `m`, time `n` is
//! `|Y^n_m − u(t^n, X^n_m)| / max(|u(t^n, X^n_m)|, 1e-12)`; curves report the
//! mean and mean + 2·(population) standard deviation over paths. When the
//! exact values come from Monte Carlo, a model error within three oracle
//! standard errors is flagged as indistinguishable and contributes zero.

use crate::error::{Error, Result};
use crate::path::{simulate, BrownianBatch, Predictor, TimeGrid, TrajectoryBatch};
use crate::problems::{ExactValues, ProblemSpec};
use crate::rng;

pub const RELATIVE_ERROR_FLOOR: f64 = 1e-12;
/// Oracle standard errors within which a model error is not counted.
pub const INDISTINGUISHABLE_SE: f64 = 3.0;

/// Monte-Carlo oracle settings (ignored by closed-form solutions).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleSettings {
    pub samples: usize,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            samples: 10_000,
            seed: 0x05EE_D0F0_AC1E,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCurves {
    pub times: Vec<f64>,
    pub mean_rel_err: Vec<f64>,
    pub mean_plus_2std: Vec<f64>,
    /// Paths per time whose error sat within the oracle's noise.
    pub indistinguishable: Vec<usize>,
    pub m_test: usize,
}

impl ErrorCurves {
    pub fn max_mean(&self) -> f64 {
        self.mean_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Y0Summary {
    pub y0_pred: f64,
    pub y0_ref: Option<f64>,
    pub y0_ref_stderr: Option<f64>,
    pub rel_err: Option<f64>,
}

/// Untracked rollout of `M_test` fresh paths on a uniform `N`-step grid.
pub fn predict_trajectories(
    model: &dyn Predictor,
    prob: &ProblemSpec,
    m_test: usize,
    steps: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    let grid = TimeGrid::uniform(prob.horizon(), steps)?;
    let dw = BrownianBatch::sample(m_test, steps, prob.dim(), grid.dt()[0], seed)?;
    simulate(model, prob, &dw, &grid)
}

/// Exact solution along every path, one entry per grid time. Monte-Carlo
/// oracles draw from streams keyed by `(oracle seed, time index)`.
pub fn exact_along(
    traj: &TrajectoryBatch,
    prob: &ProblemSpec,
    oracle: OracleSettings,
) -> Result<Vec<ExactValues>> {
    if !prob.has_exact() {
        return Err(Error::MissingOracle(prob.name().to_string()));
    }
    traj.grid
        .times()
        .iter()
        .zip(&traj.x)
        .enumerate()
        .map(|(n, (&t, x))| {
            prob.exact_values(
                t,
                x,
                oracle.samples,
                rng::stream_key(&[oracle.seed, n as u64]),
            )
        })
        .collect()
}

/// Aggregates relative errors against precomputed exact values.
pub fn error_curves_from(traj: &TrajectoryBatch, exact: &[ExactValues]) -> Result<ErrorCurves> {
    if exact.len() != traj.y.len() {
        return Err(Error::Contract(format!(
            "{} exact slices for {} grid times",
            exact.len(),
            traj.y.len()
        )));
    }
    let m = traj.num_paths();
    let mut curves = ErrorCurves {
        times: traj.grid.times().to_vec(),
        mean_rel_err: Vec::with_capacity(exact.len()),
        mean_plus_2std: Vec::with_capacity(exact.len()),
        indistinguishable: Vec::with_capacity(exact.len()),
        m_test: m,
    };
    for (y, ex) in traj.y.iter().zip(exact) {
        y.expect_same_shape(&ex.value, "relative error")?;
        let mut flagged = 0;
        let errs: Vec<f64> = (0..m)
            .map(|r| {
                let truth = ex.value.data()[r];
                let miss = (y.data()[r] - truth).abs();
                if let Some(se) = &ex.stderr {
                    if miss < INDISTINGUISHABLE_SE * se.data()[r] {
                        flagged += 1;
                        return 0.0;
                    }
                }
                miss / truth.abs().max(RELATIVE_ERROR_FLOOR)
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / m as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / m as f64;
        curves.mean_rel_err.push(mean);
        curves.mean_plus_2std.push(mean + 2.0 * var.sqrt());
        curves.indistinguishable.push(flagged);
    }
    Ok(curves)
}

pub fn relative_error_curves(
    traj: &TrajectoryBatch,
    prob: &ProblemSpec,
    oracle: OracleSettings,
) -> Result<ErrorCurves> {
    let exact = exact_along(traj, prob, oracle)?;
    error_curves_from(traj, &exact)
}

/// Predicted `u(0, ξ)` next to the best available reference.
pub fn y0_summary(
    model: &dyn Predictor,
    prob: &ProblemSpec,
    oracle: OracleSettings,
) -> Result<Y0Summary> {
    let y0_pred = model.predict(0.0, prob.xi())?.u.data()[0];
    let (y0_ref, y0_ref_stderr) = if prob.has_exact() {
        let ex = prob.exact_values(0.0, prob.xi(), oracle.samples, oracle.seed)?;
        (Some(ex.value.data()[0]), ex.stderr.map(|s| s.data()[0]))
    } else {
        (prob.reference_y0(), None)
    };
    let rel_err = y0_ref.map(|r| (y0_pred - r).abs() / r.abs().max(RELATIVE_ERROR_FLOOR));
    Ok(Y0Summary {
        y0_pred,
        y0_ref,
        y0_ref_stderr,
        rel_err,
    })
}
