#![allow(dead_code)]

use fbsnn::ad::{Tape, Tensor, Var};
use fbsnn::path::{BrownianBatch, TimeGrid};
use fbsnn::problems::ProblemSpec;
use fbsnn::trainer::loss_and_gradients;
use fbsnn::{NetParams, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// ‖a − b‖₂ / ‖b‖₂ over all entries.
pub fn rel_err(a: &[Tensor], b: &[Tensor]) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (p, q) in x.data().iter().zip(y.data()) {
            diff += (p - q) * (p - q);
            norm += q * q;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-300)
}

/// Central differences of a scalar function of several tensors.
pub fn central_diff(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = f(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = f(&work);
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
        }
        grads.push(g);
    }
    grads
}

/// Relative error between tape gradients and finite differences of
/// `sum(w ⊙ f(inputs))` for a fixed random weighting `w`.
pub fn check_op(inputs: Vec<Tensor>, seed: u64, f: impl Fn(&Tape, &[Var]) -> Result<Var>) -> f64 {
    let shape = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars).unwrap();
        tape.shape(out)
    };
    let w = random_tensor(shape.0, shape.1, -1.0, 1.0, seed);
    let weighted = |tape: &Tape, vars: &[Var]| {
        let out = f(tape, vars).unwrap();
        tape.sum_all(tape.mul(out, tape.constant(w.clone())).unwrap())
            .unwrap()
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = weighted(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let ad: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).unwrap().clone())
        .collect();

    let fd = central_diff(&inputs, |xs| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = weighted(&tape, &vars);
        let v = tape.value(loss).data()[0];
        v
    });
    rel_err(&ad, &fd)
}

pub fn params_as_vec(params: &NetParams) -> Vec<Tensor> {
    params.tensors().cloned().collect()
}

pub fn with_params(params: &NetParams, values: &[Tensor]) -> NetParams {
    let mut p = params.clone();
    for (dst, src) in p.tensors_mut().zip(values) {
        dst.data_mut().copy_from_slice(src.data());
    }
    p
}

/// Relative error of the training-loss gradient against finite differences.
pub fn loss_gradient_error(
    params: &NetParams,
    prob: &ProblemSpec,
    steps: usize,
    batch: usize,
    seed: u64,
) -> f64 {
    let grid = TimeGrid::uniform(prob.horizon(), steps).unwrap();
    let dw = BrownianBatch::sample(batch, steps, prob.dim(), grid.dt()[0], seed).unwrap();
    let (_, _, ad) = loss_and_gradients(params, prob, &dw, &grid).unwrap();
    let fd = central_diff(&params_as_vec(params), |values| {
        loss_and_gradients(&with_params(params, values), prob, &dw, &grid)
            .unwrap()
            .0
    });
    rel_err(&ad, &fd)
}

/// Drift `μ = Y·1`, `σ = 0.3·I`, `φ = −0.5·Y + sum(Z)`, `g(x) = sin(sum x)`.
pub fn coupled_problem(d: usize) -> ProblemSpec {
    ProblemSpec::new("coupled", vec![0.2; d], 0.5)
        .unwrap()
        .with_drift(move |tape, _t, _x, y, _z| {
            tape.matmul(y, tape.constant(Tensor::filled(1, d, 1.0)))
        })
        .with_diffusion(|tape, _t, _x, _y, dw| tape.scale(dw, 0.3))
        .with_generator(|tape, _t, _x, y, z| tape.add(tape.scale(y, -0.5)?, tape.sum_cols(z)?))
        .with_terminal(|tape, x| {
            let s = tape.sum_cols(x)?;
            tape.activation(s, fbsnn::Activation::Sine)
        })
}

/// Orthonormal Hermite function `h_n(z)` and `√(2n)·h_{n−1}(z)`, whose ratio is
/// the Newton step for a root of `h_n`.
fn hermite(n: usize, z: f64) -> (f64, f64) {
    let (mut p1, mut p2) = (std::f64::consts::PI.powf(-0.25), 0.0);
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

/// Nodes (descending) and weights of `n`-point Gauss–Hermite quadrature for the
/// weight `exp(−x²)`. Roots are bracketed by a sign scan over `[0, √(2n+1)]`
/// and polished with Newton's method.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let top = (2.0 * n as f64 + 1.0).sqrt();
    let grid = 200_000;
    let mut positive = Vec::with_capacity(n / 2);
    let mut prev = (0.0, hermite(n, 0.0).0);
    for i in 1..=grid {
        let z = top * i as f64 / grid as f64;
        let h = hermite(n, z).0;
        if h == 0.0 || h.signum() != prev.1.signum() {
            let mut r = 0.5 * (prev.0 + z);
            for _ in 0..50 {
                let (p, dp) = hermite(n, r);
                let step = p / dp;
                r -= step;
                if step.abs() < 1e-16 * r {
                    break;
                }
            }
            positive.push(r);
        }
        prev = (z, h);
    }
    assert_eq!(positive.len(), n / 2, "missed quadrature roots");
    positive.reverse();
    let mut x: Vec<f64> = positive.clone();
    if n % 2 == 1 {
        x.push(0.0);
    }
    x.extend(positive.iter().rev().map(|r| -r));
    let w = x
        .iter()
        .map(|&z| {
            let dp = hermite(n, z).1;
            2.0 / (dp * dp)
        })
        .collect();
    (x, w)
}

/// `E[f(Z)]` for standard normal `Z`.
pub fn gaussian_expectation(n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = gauss_hermite(n);
    let s: f64 = x
        .iter()
        .zip(&w)
        .map(|(&xi, &wi)| wi * f(std::f64::consts::SQRT_2 * xi))
        .sum();
    s / std::f64::consts::PI.sqrt()
}

/// Ignores the state; for rollouts of problems whose forward dynamics do not
/// depend on `(Y, Z)`.
pub struct ZeroModel(pub usize);

impl fbsnn::path::Predictor for ZeroModel {
    fn state_dim(&self) -> usize {
        self.0
    }

    fn predict(&self, _t: f64, x: &Tensor) -> Result<fbsnn::NetOutput> {
        Ok(fbsnn::NetOutput {
            u: Tensor::zeros(x.rows(), 1),
            du: Tensor::zeros(x.rows(), x.cols()),
        })
    }
}

/// Closed-form BSB solution `c(t)·‖x‖²` expressed on the tape.
pub struct ExactBsbModel(pub usize);

impl fbsnn::SolutionModel for ExactBsbModel {
    fn state_dim(&self) -> usize {
        self.0
    }

    fn value_and_gradient(&self, tape: &Tape, t: f64, x: Var) -> Result<(Var, Var)> {
        use fbsnn::problems::{BSB_HORIZON, BSB_RATE, BSB_SIGMA};
        let c = ((BSB_RATE + BSB_SIGMA * BSB_SIGMA) * (BSB_HORIZON - t)).exp();
        let u = tape.scale(tape.dot_rows(x, x)?, c)?;
        let du = tape.scale(x, 2.0 * c)?;
        Ok((u, du))
    }
}

/// One-dimensional geometric Brownian motion `dX = 0.4·X dW`, `X_0 = 1`,
/// i.e. the BSB forward dynamics in a single dimension.
pub fn gbm_problem() -> ProblemSpec {
    ProblemSpec::new("gbm", vec![1.0], 1.0)
        .unwrap()
        .with_diffusion(|tape, _t, x, _y, dw| {
            tape.scale(tape.mul(x, dw)?, fbsnn::problems::BSB_SIGMA)
        })
}

/// Mean squared Euler endpoint error for the GBM above with `fine` steps and
/// with `fine / 2` steps driven by the same Brownian paths.
pub fn gbm_strong_errors(paths: usize, fine: usize, seed: u64) -> (f64, f64) {
    use fbsnn::path::simulate;
    let sigma = fbsnn::problems::BSB_SIGMA;
    let prob = gbm_problem();
    let fine_dw = BrownianBatch::sample(paths, fine, 1, 1.0 / fine as f64, seed).unwrap();
    let coarse: Vec<Tensor> = (0..fine / 2)
        .map(|n| {
            fine_dw
                .increments(2 * n)
                .add(&fine_dw.increments(2 * n + 1))
                .unwrap()
        })
        .collect();
    let coarse_dw = BrownianBatch::from_increments(coarse).unwrap();
    let w_t: Vec<f64> = (0..paths)
        .map(|m| (0..fine).map(|n| fine_dw.get(m, n, 0)).sum())
        .collect();
    let mse = |dw: &BrownianBatch, steps: usize| {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        let traj = simulate(&ZeroModel(1), &prob, dw, &grid).unwrap();
        let end = &traj.x[steps];
        (0..paths)
            .map(|m| {
                let exact = (-0.5 * sigma * sigma + sigma * w_t[m]).exp();
                (end.data()[m] - exact).powi(2)
            })
            .sum::<f64>()
            / paths as f64
    };
    (mse(&fine_dw, fine), mse(&coarse_dw, fine / 2))
}

/// Hand-rolled scalar Adam for `f(w) = a·(w − c)²`.
pub fn scalar_adam(mut w: f64, a: f64, c: f64, lr: f64, steps: usize) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for t in 1..=steps as i32 {
        let g = 2.0 * a * (w - c);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    w
}

/// Relative error of the network's `Du` against finite differences of `u`.
pub fn spatial_gradient_error(net: &NetParams, t: f64, x: &Tensor) -> f64 {
    let tt = Tensor::filled(x.rows(), 1, t);
    let du = net.eval_u_grad(&tt, x).unwrap().du;
    // each row's u depends only on that row's x, so summing rows keeps
    // the per-row partials apart
    let fd = central_diff(std::slice::from_ref(x), |xs| {
        net.eval_u(&tt, &xs[0]).unwrap().sum()
    });
    rel_err(&[du], &fd)
}

/// Largest CLT z-score among endpoint means, variances and the covariance of
/// `X_T = ξ + W_T` simulated with `μ = 0`, `σ = I` in two dimensions.
pub fn endpoint_law_max_z(m: usize, seed: u64) -> f64 {
    let xi = [0.5, -1.0];
    let prob = ProblemSpec::new("bm", xi.to_vec(), 1.0)
        .unwrap()
        .with_diffusion(|_tape, _t, _x, _y, dw| Ok(dw));
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let dw = BrownianBatch::sample(m, 10, 2, 0.1, seed).unwrap();
    let traj = fbsnn::path::simulate(&ZeroModel(2), &prob, &dw, &grid).unwrap();
    let end = &traj.x[10];
    let mf = m as f64;
    let mean: Vec<f64> = (0..2)
        .map(|k| (0..m).map(|r| end.get(r, k)).sum::<f64>() / mf)
        .collect();
    let cov = |a: usize, b: usize| {
        (0..m)
            .map(|r| (end.get(r, a) - mean[a]) * (end.get(r, b) - mean[b]))
            .sum::<f64>()
            / mf
    };
    let mut z: Vec<f64> = (0..2)
        .map(|k| (mean[k] - xi[k]).abs() * mf.sqrt())
        .collect();
    z.extend((0..2).map(|k| (cov(k, k) - 1.0).abs() / (2.0 / mf).sqrt()));
    z.push(cov(0, 1).abs() * mf.sqrt());
    z.into_iter().fold(0.0, f64::max)
}
