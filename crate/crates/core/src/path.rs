//! Brownian increments and the Euler–Maruyama rollout
//!
//! ```text
//! X^{n+1} = X^n + μ(t^n, X^n, Y^n, Z^n) Δt + σ(t^n, X^n, Y^n) ΔW^n,   X^0 = ξ
//! (Y^n, Z^n) = (u, Du)(t^n, X^n)
//! ```
//!
//! [`roll_forward`] records the whole recursion on a tape so that gradients
//! reach the network through `X` when the dynamics are coupled. [`simulate`]
//! runs the same recursion off-tape, one step at a time, for inference.

use crate::ad::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::net::{NetOutput, NetParams, SolutionModel};
use crate::problems::ProblemSpec;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    steps: Vec<f64>,
}

impl TimeGrid {
    /// `N` equal steps over `[0, T]`: `t_n = n·T/N`.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let dt = horizon / n as f64;
        let mut times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        times[n] = horizon;
        Ok(TimeGrid {
            times,
            steps: vec![dt; n],
        })
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self) -> &[f64] {
        &self.steps
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// `M × N × d` Gaussian increments, stored step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianBatch {
    samples: usize,
    steps: usize,
    dim: usize,
    seed: u64,
    data: Vec<f64>,
}

impl BrownianBatch {
    /// i.i.d. `N(0, dt)` increments. Each `(sample, step)` block of `d` draws
    /// comes from its own stream keyed by `(seed, sample, step)`.
    pub fn sample(samples: usize, steps: usize, dim: usize, dt: f64, seed: u64) -> Result<Self> {
        if samples == 0 || steps == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "Brownian batch needs positive sizes, got M={samples} N={steps} d={dim}"
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!(
                "step size must be positive, got {dt}"
            )));
        }
        let std = dt.sqrt();
        let mut data = vec![0.0; samples * steps * dim];
        for n in 0..steps {
            for m in 0..samples {
                let mut stream = rng::stream(&[seed, m as u64, n as u64]);
                let start = (n * samples + m) * dim;
                rng::fill_normal(&mut stream, std, &mut data[start..start + dim]);
            }
        }
        Ok(BrownianBatch {
            samples,
            steps,
            dim,
            seed,
            data,
        })
    }

    /// Wraps explicit increments laid out as `steps` blocks of M×d.
    pub fn from_increments(increments: Vec<Tensor>) -> Result<Self> {
        let Some(first) = increments.first() else {
            return Err(Error::Config(
                "Brownian batch needs at least one step".into(),
            ));
        };
        let (samples, dim) = first.shape();
        let mut data = Vec::with_capacity(increments.len() * samples * dim);
        for inc in &increments {
            first.expect_same_shape(inc, "brownian increments")?;
            data.extend_from_slice(inc.data());
        }
        Ok(BrownianBatch {
            samples,
            steps: increments.len(),
            dim,
            seed: 0,
            data,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, sample: usize, step: usize, k: usize) -> f64 {
        self.data[(step * self.samples + sample) * self.dim + k]
    }

    /// `ΔW^n` as an M×d tensor.
    pub fn increments(&self, step: usize) -> Tensor {
        let block = self.samples * self.dim;
        let data = self.data[step * block..(step + 1) * block].to_vec();
        Tensor::from_vec(self.samples, self.dim, data).expect("block size")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Rollout recorded on a tape. Vectors are indexed by time step.
#[derive(Clone, Debug)]
pub struct TapedTrajectory {
    pub grid: TimeGrid,
    pub x: Vec<Var>,
    pub y: Vec<Var>,
    pub z: Vec<Var>,
    /// `ΔW^n` constants, one per step.
    pub dw: Vec<Var>,
    /// `σ(t^n, X^n, Y^n) ΔW^n`, one per step; `None` for zero diffusion.
    pub sigma_dw: Vec<Option<Var>>,
}

impl TapedTrajectory {
    pub fn values(&self, tape: &Tape) -> TrajectoryBatch {
        let grab = |v: &Vec<Var>| v.iter().map(|&id| tape.value(id).clone()).collect();
        TrajectoryBatch {
            grid: self.grid.clone(),
            x: grab(&self.x),
            y: grab(&self.y),
            z: grab(&self.z),
        }
    }
}

/// Plain-value trajectories: `x[n]` is M×d, `y[n]` M×1, `z[n]` M×d for `n = 0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub grid: TimeGrid,
    pub x: Vec<Tensor>,
    pub y: Vec<Tensor>,
    pub z: Vec<Tensor>,
}

impl TrajectoryBatch {
    pub fn num_paths(&self) -> usize {
        self.x.first().map_or(0, Tensor::rows)
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Tensor::cols)
    }

    /// Reorders paths; row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_paths(&self, perm: &[usize]) -> TrajectoryBatch {
        let pick = |v: &Vec<Tensor>| v.iter().map(|t| t.select_rows(perm)).collect();
        TrajectoryBatch {
            grid: self.grid.clone(),
            x: pick(&self.x),
            y: pick(&self.y),
            z: pick(&self.z),
        }
    }
}

fn check_dims(
    model_dim: usize,
    prob: &ProblemSpec,
    dw: &BrownianBatch,
    grid: &TimeGrid,
) -> Result<()> {
    if model_dim != prob.dim() || dw.dim() != prob.dim() {
        return Err(Error::Contract(format!(
            "dimension mismatch: model d={model_dim}, problem d={}, increments d={}",
            prob.dim(),
            dw.dim()
        )));
    }
    if dw.steps() != grid.num_steps() {
        return Err(Error::Contract(format!(
            "increments have {} steps but the grid has {}",
            dw.steps(),
            grid.num_steps()
        )));
    }
    Ok(())
}

fn ensure_finite(t: &Tensor, step: usize, what: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, what })
    }
}

/// Coupled Euler–Maruyama rollout on `tape`.
pub fn roll_forward(
    tape: &Tape,
    model: &dyn SolutionModel,
    prob: &ProblemSpec,
    dw: &BrownianBatch,
    grid: &TimeGrid,
) -> Result<TapedTrajectory> {
    check_dims(model.state_dim(), prob, dw, grid)?;
    let m = dw.samples();
    let n_steps = grid.num_steps();
    let times = grid.times();

    let mut x = tape.constant(Tensor::broadcast_row(prob.xi().data(), m));
    let mut traj = TapedTrajectory {
        grid: grid.clone(),
        x: Vec::with_capacity(n_steps + 1),
        y: Vec::with_capacity(n_steps + 1),
        z: Vec::with_capacity(n_steps + 1),
        dw: Vec::with_capacity(n_steps),
        sigma_dw: Vec::with_capacity(n_steps),
    };

    for (n, &t) in times.iter().enumerate() {
        let (y, z) = model.value_and_gradient(tape, t, x)?;
        ensure_finite(&tape.value(y), n, "Y")?;
        ensure_finite(&tape.value(z), n, "Z")?;
        traj.x.push(x);
        traj.y.push(y);
        traj.z.push(z);
        if n == n_steps {
            break;
        }

        let inc = tape.constant(dw.increments(n));
        let noise = prob.diffusion(tape, t, x, y, inc)?;
        let mut next = x;
        if let Some(mu) = prob.drift(tape, t, x, y, z)? {
            next = tape.add(next, tape.scale(mu, grid.dt()[n])?)?;
        }
        if let Some(noise) = noise {
            next = tape.add(next, noise)?;
        }
        ensure_finite(&tape.value(next), n + 1, "X")?;
        traj.dw.push(inc);
        traj.sigma_dw.push(noise);
        x = next;
    }
    Ok(traj)
}

/// Off-tape evaluation of `(u, Du)`.
pub trait Predictor {
    fn state_dim(&self) -> usize;
    fn predict(&self, t: f64, x: &Tensor) -> Result<NetOutput>;
}

impl Predictor for NetParams {
    fn state_dim(&self) -> usize {
        NetParams::state_dim(self)
    }

    fn predict(&self, t: f64, x: &Tensor) -> Result<NetOutput> {
        self.eval_u_grad(&Tensor::filled(x.rows(), 1, t), x)
    }
}

/// Inference rollout: same recursion as [`roll_forward`] with a fresh
/// scratch tape per step, so memory stays O(M·d).
pub fn simulate(
    model: &dyn Predictor,
    prob: &ProblemSpec,
    dw: &BrownianBatch,
    grid: &TimeGrid,
) -> Result<TrajectoryBatch> {
    check_dims(model.state_dim(), prob, dw, grid)?;
    let m = dw.samples();
    let n_steps = grid.num_steps();
    let times = grid.times();
    let mut out = TrajectoryBatch {
        grid: grid.clone(),
        x: Vec::with_capacity(n_steps + 1),
        y: Vec::with_capacity(n_steps + 1),
        z: Vec::with_capacity(n_steps + 1),
    };
    let mut x = Tensor::broadcast_row(prob.xi().data(), m);
    for (n, &t) in times.iter().enumerate() {
        let NetOutput { u, du } = model.predict(t, &x)?;
        ensure_finite(&u, n, "Y")?;
        ensure_finite(&du, n, "Z")?;
        if n == n_steps {
            out.x.push(x);
            out.y.push(u);
            out.z.push(du);
            break;
        }
        let tape = Tape::new();
        let (xv, yv, zv) = (
            tape.constant(x.clone()),
            tape.constant(u.clone()),
            tape.constant(du.clone()),
        );
        let inc = tape.constant(dw.increments(n));
        let mut next = xv;
        if let Some(mu) = prob.drift(&tape, t, xv, yv, zv)? {
            next = tape.add(next, tape.scale(mu, grid.dt()[n])?)?;
        }
        if let Some(noise) = prob.diffusion(&tape, t, xv, yv, inc)? {
            next = tape.add(next, noise)?;
        }
        let next = tape.value(next).clone();
        ensure_finite(&next, n + 1, "X")?;
        out.x.push(std::mem::replace(&mut x, next));
        out.y.push(u);
        out.z.push(du);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Activation;

    #[test]
    fn uniform_grid() {
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        assert_eq!(g.times().len(), 51);
        assert_eq!(g.times()[0], 0.0);
        assert_eq!(g.times()[50], 1.0);
        assert!((g.times()[10] - 0.2).abs() < 1e-15);
        assert!(g.dt().iter().all(|&d| d == 0.02));
        assert!(TimeGrid::uniform(1.0, 0).is_err());
    }

    #[test]
    fn brownian_is_deterministic() {
        let a = BrownianBatch::sample(4, 3, 2, 0.1, 11).unwrap();
        let b = BrownianBatch::sample(4, 3, 2, 0.1, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, BrownianBatch::sample(4, 3, 2, 0.1, 12).unwrap());
    }

    #[test]
    fn brownian_entries_reproducible_in_isolation() {
        // a larger batch shares every (sample, step) block with a smaller one
        let small = BrownianBatch::sample(2, 2, 3, 0.1, 5).unwrap();
        let big = BrownianBatch::sample(5, 4, 3, 0.1, 5).unwrap();
        for m in 0..2 {
            for n in 0..2 {
                for k in 0..3 {
                    assert_eq!(small.get(m, n, k), big.get(m, n, k));
                }
            }
        }
    }

    #[test]
    fn brownian_rejects_bad_sizes() {
        assert!(BrownianBatch::sample(0, 1, 1, 0.1, 0).is_err());
        assert!(BrownianBatch::sample(1, 1, 1, 0.0, 0).is_err());
    }

    fn frozen_problem() -> ProblemSpec {
        ProblemSpec::new("frozen", vec![0.5, -1.0], 1.0).unwrap()
    }

    #[test]
    fn zero_dynamics_freeze_state() {
        let prob = frozen_problem();
        let net = NetParams::init(&[3, 6, 1], Activation::Sine, 1).unwrap();
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let dw = BrownianBatch::sample(3, 5, 2, 0.2, 1).unwrap();
        let traj = simulate(&net, &prob, &dw, &grid).unwrap();
        for x in &traj.x {
            assert_eq!(x, &Tensor::broadcast_row(&[0.5, -1.0], 3));
        }
    }

    struct Identity;

    impl Predictor for Identity {
        fn state_dim(&self) -> usize {
            1
        }

        fn predict(&self, _t: f64, x: &Tensor) -> Result<NetOutput> {
            Ok(NetOutput {
                u: x.clone(),
                du: Tensor::filled(x.rows(), 1, 1.0),
            })
        }
    }

    #[test]
    fn single_step_identity() {
        let prob = ProblemSpec::new("unit", vec![0.0], 1.0)
            .unwrap()
            .with_diffusion(|_t, _time, _x, _y, dw| Ok(dw));
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let dw = BrownianBatch::from_increments(vec![Tensor::scalar(0.1)]).unwrap();
        let traj = simulate(&Identity, &prob, &dw, &grid).unwrap();
        assert_eq!(traj.x[1].data(), &[0.1]);
        assert_eq!(traj.y[1].data(), &[0.1]);
    }

    #[test]
    fn taped_and_untaped_rollouts_agree() {
        let prob = crate::problems::make_bsb(2).unwrap();
        let net = NetParams::init(&[3, 5, 5, 1], Activation::Tanh, 3).unwrap();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let dw = BrownianBatch::sample(3, 4, 2, 0.25, 8).unwrap();
        let plain = simulate(&net, &prob, &dw, &grid).unwrap();
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let taped = roll_forward(&tape, &bound, &prob, &dw, &grid)
            .unwrap()
            .values(&tape);
        assert_eq!(plain, taped);
    }

    #[test]
    fn divergence_reports_step() {
        let prob = ProblemSpec::new("blowup", vec![1.0], 1.0)
            .unwrap()
            .with_drift(|tape, _t, x, _y, _z| tape.scale(tape.mul(x, x)?, 1e200));
        let net = NetParams::init(&[2, 3, 1], Activation::Sine, 0).unwrap();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let dw = BrownianBatch::sample(2, 4, 1, 0.25, 0).unwrap();
        let err = simulate(&net, &prob, &dw, &grid).unwrap_err();
        assert!(
            matches!(err, Error::Divergence { step: 2, what: "X" }),
            "{err}"
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let prob = crate::problems::make_hjb(3).unwrap();
        let net = NetParams::init(&[3, 4, 1], Activation::Sine, 0).unwrap();
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let dw = BrownianBatch::sample(2, 2, 3, 0.5, 0).unwrap();
        assert!(matches!(
            simulate(&net, &prob, &dw, &grid),
            Err(Error::Contract(_))
        ));
    }
}
