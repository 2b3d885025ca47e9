//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Name fragments on the command line
//! restrict the run, e.g. `cargo test --test acceptance -- adam`.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use fbsnn::ad::{Activation, Tensor};
use fbsnn::evaluation::{predict_trajectories, relative_error_curves, y0_summary, OracleSettings};
use fbsnn::net::NetParams;
use fbsnn::problems::{hjb_exact_mc, make_ac, make_bsb, make_hjb, ProblemSpec, AC_REFERENCE_Y0};
use fbsnn::trainer::{
    adam_step, decode, encode, train_problem, AdamState, Stage, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOSS_GRAD_TOL: f64 = 1e-5;
const DU_TOL: f64 = 1e-6;
const BSB_Y0_TOL: f64 = 2e-2;
const BSB_CURVE_TOL: f64 = 5e-2;
const HJB_Y0_TOL: f64 = 3e-2;
const AC_Y0_ABS_TOL: f64 = 0.02;
const MC_SE_BOUND: f64 = 3.0;
const CLT_Z_BOUND: f64 = 4.0;
const STRONG_RATIO: (f64, f64) = (0.35, 0.65);
const ADAM_TOL: f64 = 1e-12;

const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = (1 << 63) | TRAIN_SEED;
const M_TEST: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn reduced_config(problem: &str, d: usize, steps: usize, schedule: &[(usize, f64)]) -> TrainConfig {
    TrainConfig {
        problem: problem.into(),
        d,
        steps,
        batch: 64,
        hidden: vec![64, 64, 64],
        activation: Activation::Sine,
        seed: TRAIN_SEED,
        schedule: schedule
            .iter()
            .map(|&(iterations, learning_rate)| Stage {
                iterations,
                learning_rate,
            })
            .collect(),
        checkpoint: None,
        log_path: None,
        log_every: 100,
        input_scaling: None,
    }
}

fn train(
    problem: &str,
    d: usize,
    steps: usize,
    schedule: &[(usize, f64)],
    prob: &ProblemSpec,
) -> NetParams {
    train_problem(reduced_config(problem, d, steps, schedule), prob)
        .unwrap()
        .0
}

fn loss_gradients() -> Outcome {
    let cases = [
        ("bsb", make_bsb(2).unwrap()),
        ("hjb", make_hjb(2).unwrap()),
        ("ac", make_ac(2).unwrap()),
        ("coupled", coupled_problem(2)),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (k, (name, prob)) in cases.iter().enumerate() {
        let net = NetParams::init(&[3, 8, 1], Activation::Sine, 500 + k as u64).unwrap();
        let err = loss_gradient_error(&net, prob, 3, 2, 600 + k as u64);
        worst = worst.max(err);
        parts.push(format!("{name} {err:.1e}"));
    }
    outcome(
        worst < LOSS_GRAD_TOL,
        format!("{} (tol {LOSS_GRAD_TOL:e})", parts.join(", ")),
    )
}

fn spatial_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for case in 0..40u64 {
        let d = 1 + (case as usize % 10);
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![d + 1];
        sizes.extend((0..depth).map(|_| rng.random_range(2..16usize)));
        sizes.push(1);
        let act = if case % 2 == 0 {
            Activation::Sine
        } else {
            Activation::Tanh
        };
        let net = NetParams::init(&sizes, act, case).unwrap();
        let x = random_tensor(4, d, -1.5, 1.5, 1000 + case);
        worst = worst.max(spatial_gradient_error(&net, rng.random_range(0.0..1.0), &x));
    }
    outcome(
        worst < DU_TOL,
        format!("40 random nets, d <= 10, worst {worst:.1e} (tol {DU_TOL:e})"),
    )
}

fn bsb_reduced() -> (Outcome, Outcome) {
    let prob = make_bsb(10).unwrap();
    let net = train("bsb", 10, 20, &[(2000, 1e-3), (1000, 1e-4)], &prob);
    let s = y0_summary(&net, &prob, OracleSettings::default()).unwrap();
    let rel = s.rel_err.unwrap();
    let y0 = outcome(
        rel < BSB_Y0_TOL,
        format!(
            "y0_pred {:.5} vs {:.5}, rel err {rel:.2e} (tol {BSB_Y0_TOL:e})",
            s.y0_pred,
            s.y0_ref.unwrap()
        ),
    );
    let traj = predict_trajectories(&net, &prob, M_TEST, 20, TEST_SEED).unwrap();
    let curves = relative_error_curves(&traj, &prob, OracleSettings::default()).unwrap();
    let worst = curves.max_mean();
    let curve = outcome(
        worst < BSB_CURVE_TOL,
        format!(
            "max mean rel err over {} grid times {worst:.2e} (tol {BSB_CURVE_TOL:e})",
            curves.times.len()
        ),
    );
    (y0, curve)
}

fn hjb_reduced() -> Outcome {
    let prob = make_hjb(10).unwrap();
    let net = train("hjb", 10, 20, &[(2000, 1e-3), (1000, 1e-4)], &prob);
    let oracle = OracleSettings {
        samples: 100_000,
        ..OracleSettings::default()
    };
    let s = y0_summary(&net, &prob, oracle).unwrap();
    let rel = s.rel_err.unwrap();
    outcome(
        rel < HJB_Y0_TOL,
        format!(
            "y0_pred {:.5} vs MC {:.5} ± {:.5}, rel err {rel:.2e} (tol {HJB_Y0_TOL:e})",
            s.y0_pred,
            s.y0_ref.unwrap(),
            s.y0_ref_stderr.unwrap()
        ),
    )
}

fn allen_cahn() -> Outcome {
    let prob = make_ac(20).unwrap();
    let net = train("ac", 20, 15, &[(3000, 1e-3), (2000, 1e-4)], &prob);
    let y0 = y0_summary(&net, &prob, OracleSettings::default())
        .unwrap()
        .y0_pred;
    let miss = (y0 - AC_REFERENCE_Y0).abs();
    outcome(
        miss < AC_Y0_ABS_TOL,
        format!("y0_pred {y0:.5} vs {AC_REFERENCE_Y0}, |diff| {miss:.4} (tol {AC_Y0_ABS_TOL})"),
    )
}

fn oracle_cross_check() -> Outcome {
    let quad = -gaussian_expectation(200, |z| 2.0 / (1.0 + 2.0 * z * z)).ln();
    let est = hjb_exact_mc(0.0, &Tensor::zeros(1, 1), 100_000, 31).unwrap();
    let (mc, se) = (est.value.data()[0], est.stderr.data()[0]);
    let z = (mc - quad).abs() / se;
    outcome(
        z < MC_SE_BOUND,
        format!("MC {mc:.5} ± {se:.5}, quadrature {quad:.5}, {z:.2} SE (bound {MC_SE_BOUND})"),
    )
}

fn euler_maruyama() -> Outcome {
    let z = endpoint_law_max_z(100_000, 32);
    let (fine, coarse) = gbm_strong_errors(20_000, 64, 33);
    let ratio = fine / coarse;
    outcome(
        z < CLT_Z_BOUND && ratio > STRONG_RATIO.0 && ratio < STRONG_RATIO.1,
        format!(
            "endpoint max z {z:.2} (bound {CLT_Z_BOUND}); strong MSE ratio N=64/N=32 {ratio:.3} (range {:?})",
            STRONG_RATIO
        ),
    )
}

fn loss_column(path: &std::path::Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let prob = make_hjb(4).unwrap();
    let mut config = reduced_config("hjb", 4, 6, &[(30, 1e-3), (20, 1e-4)]);
    config.batch = 16;
    config.hidden = vec![16, 16];
    config.log_every = 1;

    let mut logs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let mut c = config.clone();
        c.log_path = Some(dir.path().join(name));
        train_problem(c, &prob).unwrap();
        logs.push(loss_column(&dir.path().join(name)));
    }
    let replay = logs[0] == logs[1] && logs[0].len() == 50;

    let mut full = Trainer::new(config.clone(), &prob).unwrap();
    full.run().unwrap();
    let mut part = Trainer::new(config.clone(), &prob).unwrap();
    part.run_until(37).unwrap();
    let ck = part.checkpoint();
    let bytes = encode(&ck.params, &ck.adam, &ck.meta).unwrap();
    let mut resumed = Trainer::resume(config, &prob, decode(&bytes).unwrap()).unwrap();
    resumed.run().unwrap();
    let resume = full.params() == resumed.params() && full.adam() == resumed.adam();

    outcome(
        replay && resume,
        format!("replayed loss columns identical: {replay}; resume from iteration 37 identical: {resume}"),
    )
}

fn adam_oracle() -> Outcome {
    let (a, c, lr) = (2.0, -0.3, 0.01);
    let mut params = NetParams::init(&[2, 4, 1], Activation::Sine, 3).unwrap();
    let start: Vec<f64> = params.tensors().flat_map(|t| t.data().to_vec()).collect();
    let mut state = AdamState::new(&params);
    for _ in 0..10 {
        let grads: Vec<Tensor> = params
            .tensors()
            .map(|t| t.map(|w| 2.0 * a * (w - c)))
            .collect();
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
    }
    let worst = params
        .tensors()
        .flat_map(|t| t.data().to_vec())
        .zip(&start)
        .map(|(w, &w0)| (w - scalar_adam(w0, a, c, lr, 10)).abs())
        .fold(0.0, f64::max);
    outcome(
        worst < ADAM_TOL,
        format!("10 steps, max deviation {worst:.1e} (tol {ADAM_TOL:e})"),
    )
}

fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    panic::catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    })
}

fn report(id: &str, name: &str, result: Result<Outcome, String>, secs: f64) -> bool {
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(msg) => (false, format!("panicked: {msg}")),
    };
    println!(
        "criterion {id:>2} {name:<22} {}  {detail} [{secs:.1}s]",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let wanted =
        |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));

    type Single = fn() -> Outcome;
    let singles: [(&str, &str, Single); 8] = [
        ("1", "loss-gradients", loss_gradients),
        ("2", "spatial-gradients", spatial_gradients),
        ("5", "hjb-y0", hjb_reduced),
        ("6", "allen-cahn-y0", allen_cahn),
        ("7", "oracle-cross-check", oracle_cross_check),
        ("8", "euler-maruyama", euler_maruyama),
        ("9", "determinism", determinism),
        ("10", "adam-oracle", adam_oracle),
    ];

    let mut all = true;
    let mut ran = 0;
    for (id, name, f) in &singles[..2] {
        if wanted(name) {
            let start = Instant::now();
            all &= report(id, name, guarded(f), start.elapsed().as_secs_f64());
            ran += 1;
        }
    }
    if wanted("bsb-y0") || wanted("bsb-curve") {
        let start = Instant::now();
        let secs = || start.elapsed().as_secs_f64();
        match guarded(bsb_reduced) {
            Ok((y0, curve)) => {
                all &= report("3", "bsb-y0", Ok(y0), secs());
                all &= report("4", "bsb-curve", Ok(curve), secs());
            }
            Err(msg) => {
                all &= report("3", "bsb-y0", Err(msg.clone()), secs());
                all &= report("4", "bsb-curve", Err(msg), secs());
            }
        }
        ran += 2;
    }
    for (id, name, f) in &singles[2..] {
        if wanted(name) {
            let start = Instant::now();
            all &= report(id, name, guarded(f), start.elapsed().as_secs_f64());
            ran += 1;
        }
    }
    println!(
        "acceptance: {ran} criteria run, {}",
        if all { "all passed" } else { "FAILURES" }
    );
    if !all {
        std::process::exit(1);
    }
}
