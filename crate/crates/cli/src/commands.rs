use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fbsnn::evaluation::{
    error_curves_from, exact_along, predict_trajectories, y0_summary, ErrorCurves, OracleSettings,
    Y0Summary,
};
use fbsnn::path::{Predictor, TrajectoryBatch};
use fbsnn::problems::{self, ExactValues, ProblemSpec};
use fbsnn::trainer::{load_checkpoint, TrainHistory, Trainer};
use fbsnn::NetParams;

use crate::config::RunConfig;
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";
pub const TRAJECTORIES_CSV: &str = "trajectories.csv";
pub const ERROR_CURVES_CSV: &str = "error_curves.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

pub struct TrainOutcome {
    pub params: NetParams,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub resolved_config: PathBuf,
}

pub struct EvalOutcome {
    pub summary: Y0Summary,
    pub curves: Option<ErrorCurves>,
    pub written: Vec<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn prepare_output(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))
}

/// Trains the configured built-in problem.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let prob = problems::by_name(&cfg.train.problem, cfg.train.d)?;
    train_with_problem(cfg, &prob)
}

/// Trains `prob` with the settings in `cfg`, writing the checkpoint, the
/// training log and the resolved config.
pub fn train_with_problem(cfg: &RunConfig, prob: &ProblemSpec) -> Result<TrainOutcome, CliError> {
    prepare_output(cfg)?;
    let resolved_config = cfg.output_dir.join(RESOLVED_CONFIG);
    write_file(&resolved_config, &cfg.to_text())?;

    let mut train = cfg.train.clone();
    let checkpoint = cfg.checkpoint_path();
    let log = cfg.log_path();
    train.checkpoint = Some(checkpoint.clone());
    train.log_path = Some(log.clone());

    let mut trainer = Trainer::new(train, prob)?;
    trainer.run()?;
    let (params, _, history) = trainer.into_parts();
    Ok(TrainOutcome {
        params,
        history,
        checkpoint,
        log,
        resolved_config,
    })
}

fn check_field(field: &'static str, checkpoint: String, config: String) -> Result<(), CliError> {
    if checkpoint != config {
        return Err(CliError::Mismatch {
            field,
            checkpoint,
            config,
        });
    }
    Ok(())
}

/// Evaluates a trained checkpoint on fresh test paths.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalOutcome, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    check_field(
        "problem",
        ck.meta.problem.clone(),
        cfg.train.problem.clone(),
    )?;
    check_field(
        "d",
        ck.params.state_dim().to_string(),
        cfg.train.d.to_string(),
    )?;
    check_field(
        "layer_sizes",
        format!("{:?}", ck.params.layer_sizes()),
        format!("{:?}", cfg.train.layer_sizes()),
    )?;
    check_field(
        "activation",
        ck.params.activation().to_string(),
        cfg.train.activation.to_string(),
    )?;
    let prob = problems::by_name(&cfg.train.problem, cfg.train.d)?;
    evaluate_with(cfg, &ck.params, &prob)
}

/// Evaluation pipeline for an arbitrary predictor.
pub fn evaluate_with(
    cfg: &RunConfig,
    model: &dyn Predictor,
    prob: &ProblemSpec,
) -> Result<EvalOutcome, CliError> {
    prepare_output(cfg)?;
    let traj = predict_trajectories(model, prob, cfg.m_test, cfg.train.steps, cfg.test_seed)?;
    let oracle = OracleSettings {
        samples: cfg.oracle_samples,
        seed: cfg.oracle_seed,
    };
    let exact = if prob.has_exact() {
        Some(exact_along(&traj, prob, oracle)?)
    } else {
        None
    };

    let mut written = Vec::new();
    let path = cfg.output_dir.join(TRAJECTORIES_CSV);
    write_trajectories(&path, &traj, exact.as_deref())?;
    written.push(path);

    let curves_path = cfg.output_dir.join(ERROR_CURVES_CSV);
    let curves = match &exact {
        Some(exact) => {
            let curves = error_curves_from(&traj, exact)?;
            write_file(&curves_path, &curves_csv(&curves))?;
            written.push(curves_path);
            Some(curves)
        }
        None => {
            // a stale file from an earlier run would be misleading
            if curves_path.exists() {
                fs::remove_file(&curves_path).map_err(io_err(&curves_path))?;
            }
            None
        }
    };

    let summary = y0_summary(
        model,
        prob,
        OracleSettings {
            samples: cfg.y0_oracle_samples,
            seed: cfg.oracle_seed,
        },
    )?;
    let path = cfg.output_dir.join(SUMMARY_CSV);
    write_file(&path, &summary_csv(&summary))?;
    written.push(path);

    Ok(EvalOutcome {
        summary,
        curves,
        written,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary_csv(s: &Y0Summary) -> String {
    format!(
        "y0_pred,y0_ref,rel_err,y0_ref_stderr\n{},{},{},{}\n",
        s.y0_pred,
        opt(s.y0_ref),
        opt(s.rel_err),
        opt(s.y0_ref_stderr)
    )
}

pub fn curves_csv(c: &ErrorCurves) -> String {
    let mut out = String::from("t,mean_rel_err,mean_plus_2std,indistinguishable\n");
    for n in 0..c.times.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            c.times[n], c.mean_rel_err[n], c.mean_plus_2std[n], c.indistinguishable[n]
        );
    }
    out
}

/// Long form: one row per path per step.
fn write_trajectories(
    path: &Path,
    traj: &TrajectoryBatch,
    exact: Option<&[ExactValues]>,
) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let d = traj.dim();
    let with_se = exact.is_some_and(|e| e.iter().any(|v| v.stderr.is_some()));

    let mut header = String::from("path_id,step,t");
    for k in 0..d {
        let _ = write!(header, ",x_{k}");
    }
    header.push_str(",y_pred");
    if exact.is_some() {
        header.push_str(",y_exact");
    }
    if with_se {
        header.push_str(",exact_stderr");
    }
    writeln!(w, "{header}").map_err(io_err(path))?;

    let times = traj.grid.times();
    let mut line = String::new();
    for m in 0..traj.num_paths() {
        for (n, &t) in times.iter().enumerate() {
            line.clear();
            let _ = write!(line, "{m},{n},{t}");
            for v in traj.x[n].row(m) {
                let _ = write!(line, ",{v}");
            }
            let _ = write!(line, ",{}", traj.y[n].data()[m]);
            if let Some(exact) = exact {
                let _ = write!(line, ",{}", exact[n].value.data()[m]);
                if with_se {
                    let se = exact[n].stderr.as_ref().map_or(0.0, |s| s.data()[m]);
                    let _ = write!(line, ",{se}");
                }
            }
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Human-readable dump of a checkpoint: metadata, then one line per tensor.
pub fn cmd_export(checkpoint: &Path) -> Result<String, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let p = &ck.params;
    let mut out = String::new();
    let _ = writeln!(out, "problem: {}", ck.meta.problem);
    let _ = writeln!(out, "seed: {}", ck.meta.seed);
    let _ = writeln!(out, "iteration: {}", ck.meta.iteration);
    let _ = writeln!(out, "activation: {}", p.activation());
    let _ = writeln!(out, "layer_sizes: {:?}", p.layer_sizes());
    let _ = writeln!(out, "parameters: {}", p.num_parameters());
    let _ = writeln!(out, "adam_step: {}", ck.adam.step);
    for (k, v) in &ck.meta.extra {
        let _ = writeln!(out, "{k}: {v}");
    }
    for (k, (w, b)) in p.weights().iter().zip(p.biases()).enumerate() {
        for (name, t) in [("W", w), ("b", b)] {
            let _ = writeln!(
                out,
                "{name}{k} {}x{} frobenius={:.6e}",
                t.rows(),
                t.cols(),
                t.frobenius_norm()
            );
        }
    }
    Ok(out)
}
