//! Adam training of the solution network against the discretized FBSDE loss.
//!
//! Every iteration draws a fresh Brownian batch keyed by `(seed, iteration,
//! attempt)`, rolls it forward on a new tape, and takes one Adam step. The
//! loss is a plain sum over samples and steps, so changing `M` or `N`
//! rescales the effective step size for a given learning rate.

mod adam;
mod checkpoint;
mod loss;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{
    decode, encode, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION,
    MAGIC,
};
pub use loss::compute_loss;

use crate::ad::{Activation, Tape, Tensor};
use crate::error::{Error, Result};
use crate::net::{InputScaling, NetParams};
use crate::path::{roll_forward, BrownianBatch, TimeGrid};
use crate::problems::{self, ProblemSpec};
use crate::rng;

/// Consecutive divergent batches tolerated before training aborts.
pub const MAX_DIVERGENT_BATCHES: usize = 10;

pub const LOG_HEADER: &str = "iteration,loss,lr,y0_pred,elapsed_s";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage {
    pub iterations: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub problem: String,
    pub d: usize,
    /// Time steps `N`.
    pub steps: usize,
    /// Paths per batch `M`.
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub schedule: Vec<Stage>,
    pub checkpoint: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Record one history row every `log_every` iterations (plus first and last).
    pub log_every: usize,
    pub input_scaling: Option<InputScaling>,
}

impl TrainConfig {
    /// Four-stage protocol 2·10⁴/3·10⁴/3·10⁴/2·10⁴ iterations at 10⁻³…10⁻⁶,
    /// five hidden layers of 256, `N = 50`, `M = 100`.
    pub fn full_scale(problem: &str, d: usize) -> Self {
        TrainConfig {
            problem: problem.to_string(),
            d,
            steps: 50,
            batch: 100,
            hidden: vec![256; 4],
            activation: Activation::Sine,
            seed: 1234,
            schedule: vec![
                Stage {
                    iterations: 20_000,
                    learning_rate: 1e-3,
                },
                Stage {
                    iterations: 30_000,
                    learning_rate: 1e-4,
                },
                Stage {
                    iterations: 30_000,
                    learning_rate: 1e-5,
                },
                Stage {
                    iterations: 20_000,
                    learning_rate: 1e-6,
                },
            ],
            checkpoint: None,
            log_path: None,
            log_every: 100,
            input_scaling: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.steps == 0 || self.batch == 0 {
            return Err(Error::Config(format!(
                "d, N and M must be >= 1 (got d={}, N={}, M={})",
                self.d, self.steps, self.batch
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config(
                "schedule must have at least one stage".into(),
            ));
        }
        for (k, s) in self.schedule.iter().enumerate() {
            if s.iterations == 0 {
                return Err(Error::Config(format!(
                    "schedule stage {} has zero iterations",
                    k + 1
                )));
            }
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return Err(Error::Config(format!(
                    "schedule stage {} has non-positive learning rate {}",
                    k + 1,
                    s.learning_rate
                )));
            }
        }
        if self.log_every == 0 {
            return Err(Error::Config("log cadence must be >= 1".into()));
        }
        Ok(())
    }

    /// `[1 + d, hidden…, 1]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(1 + self.d);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(1);
        sizes
    }

    pub fn total_iterations(&self) -> usize {
        self.schedule.iter().map(|s| s.iterations).sum()
    }

    /// Learning rate for the 0-based iteration `k`, or `None` past the schedule.
    pub fn learning_rate_at(&self, k: usize) -> Option<f64> {
        let mut end = 0;
        for s in &self.schedule {
            end += s.iterations;
            if k < end {
                return Some(s.learning_rate);
            }
        }
        None
    }

    fn is_stage_boundary(&self, completed: usize) -> bool {
        let mut end = 0;
        self.schedule.iter().any(|s| {
            end += s.iterations;
            end == completed
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    /// 0-based iteration whose pre-update loss is reported.
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub y0_pred: f64,
    pub elapsed_s: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<LogRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Result of one successful optimizer iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub y0_pred: f64,
    pub lr: f64,
    /// Divergent batches skipped before this one succeeded.
    pub retries: usize,
}

/// Loss value and parameter gradients (canonical order) for one batch.
pub fn loss_and_gradients(
    params: &NetParams,
    prob: &ProblemSpec,
    dw: &BrownianBatch,
    grid: &TimeGrid,
) -> Result<(f64, f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let net = params.bind(&tape);
    let traj = roll_forward(&tape, &net, prob, dw, grid)?;
    let loss = compute_loss(&tape, &traj, prob)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Divergence {
            step: grid.num_steps(),
            what: "loss",
        });
    }
    let y0 = tape.value(traj.y[0]).data()[0];
    let grads = tape.backward(loss)?;
    let per_param: Vec<Tensor> = net
        .vars()
        .into_iter()
        .map(|v| grads.get(v).cloned().expect("every leaf has a gradient"))
        .collect();
    if per_param.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: grid.num_steps(),
            what: "gradient",
        });
    }
    Ok((loss_value, y0, per_param))
}

/// Stateful training loop; supports resuming from a checkpoint.
pub struct Trainer<'p> {
    config: TrainConfig,
    problem: &'p ProblemSpec,
    grid: TimeGrid,
    params: NetParams,
    adam: AdamState,
    completed: usize,
    history: TrainHistory,
    started: Instant,
    log: Option<File>,
}

impl<'p> Trainer<'p> {
    pub fn new(config: TrainConfig, problem: &'p ProblemSpec) -> Result<Self> {
        config.validate()?;
        let mut params = NetParams::init(&config.layer_sizes(), config.activation, config.seed)?;
        if let Some(s) = &config.input_scaling {
            params = params.with_scaling(s.clone())?;
        }
        let adam = AdamState::new(&params);
        Self::assemble(config, problem, params, adam, 0)
    }

    /// Continues from saved parameters, moments and iteration count.
    pub fn resume(
        config: TrainConfig,
        problem: &'p ProblemSpec,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        config.validate()?;
        if checkpoint.params.layer_sizes() != config.layer_sizes().as_slice() {
            return Err(Error::Config(format!(
                "checkpoint layer sizes {:?} differ from configured {:?}",
                checkpoint.params.layer_sizes(),
                config.layer_sizes()
            )));
        }
        let completed = checkpoint.meta.iteration as usize;
        Self::assemble(
            config,
            problem,
            checkpoint.params,
            checkpoint.adam,
            completed,
        )
    }

    fn assemble(
        config: TrainConfig,
        problem: &'p ProblemSpec,
        params: NetParams,
        adam: AdamState,
        completed: usize,
    ) -> Result<Self> {
        if problem.dim() != config.d {
            return Err(Error::Config(format!(
                "problem '{}' has d={} but config says d={}",
                problem.name(),
                problem.dim(),
                config.d
            )));
        }
        let grid = TimeGrid::uniform(problem.horizon(), config.steps)?;
        let log = match &config.log_path {
            Some(path) => Some(open_log(path, completed > 0)?),
            None => None,
        };
        Ok(Trainer {
            config,
            problem,
            grid,
            params,
            adam,
            completed,
            history: TrainHistory::default(),
            started: Instant::now(),
            log,
        })
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            meta: CheckpointMeta {
                problem: self.problem.name().to_string(),
                seed: self.config.seed,
                iteration: self.completed as u64,
                extra: Default::default(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = self.checkpoint();
        save_checkpoint(path, &ck.params, &ck.adam, &ck.meta)
    }

    /// Seed of the Brownian batch for `(iteration, attempt)`.
    pub fn batch_seed(&self, iteration: usize, attempt: usize) -> u64 {
        rng::stream_key(&[self.config.seed, iteration as u64, attempt as u64])
    }

    /// One Adam iteration, retrying on fresh batches after divergence.
    pub fn step(&mut self) -> Result<StepReport> {
        let k = self.completed;
        let lr = self.config.learning_rate_at(k).ok_or_else(|| {
            Error::Contract(format!("iteration {k} is past the end of the schedule"))
        })?;
        let mut attempt = 0;
        loop {
            let dw = BrownianBatch::sample(
                self.config.batch,
                self.config.steps,
                self.config.d,
                self.grid.dt()[0],
                self.batch_seed(k, attempt),
            )?;
            match loss_and_gradients(&self.params, self.problem, &dw, &self.grid) {
                Ok((loss, y0_pred, grads)) => {
                    adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
                    self.completed += 1;
                    return Ok(StepReport {
                        loss,
                        y0_pred,
                        lr,
                        retries: attempt,
                    });
                }
                Err(e) if e.is_divergence() => {
                    attempt += 1;
                    if attempt >= MAX_DIVERGENT_BATCHES {
                        return Err(Error::RetriesExhausted {
                            iteration: k,
                            attempts: attempt,
                            last: Box::new(e),
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Runs until `until` iterations are complete (capped by the schedule),
    /// logging and checkpointing along the way.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let total = self.config.total_iterations();
        let until = until.min(total);
        if let Some(path) = self.config.checkpoint.clone() {
            if self.completed == 0 {
                // also proves the path is writable before any work is done
                self.save(&path)?;
            }
        }
        while self.completed < until {
            let k = self.completed;
            let report = self.step()?;
            if k.is_multiple_of(self.config.log_every) || k + 1 == total {
                self.record(k, &report)?;
            }
            if self.config.is_stage_boundary(self.completed) {
                if let Some(path) = self.config.checkpoint.clone() {
                    self.save(&path)?;
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.total_iterations())
    }

    fn record(&mut self, iteration: usize, report: &StepReport) -> Result<()> {
        let rec = LogRecord {
            iteration,
            loss: report.loss,
            lr: report.lr,
            y0_pred: report.y0_pred,
            elapsed_s: self.started.elapsed().as_secs_f64(),
            seed: self.config.seed,
        };
        if let (Some(file), Some(path)) = (self.log.as_mut(), self.config.log_path.as_ref()) {
            writeln!(
                file,
                "{},{},{},{},{:.3}",
                rec.iteration, rec.loss, rec.lr, rec.y0_pred, rec.elapsed_s
            )
            .map_err(|e| Error::io(path, e))?;
        }
        self.history.records.push(rec);
        Ok(())
    }

    pub fn into_parts(self) -> (NetParams, AdamState, TrainHistory) {
        (self.params, self.adam, self.history)
    }
}

fn open_log(path: &Path, append: bool) -> Result<File> {
    let exists = path.exists();
    let mut file = if append {
        OpenOptions::new().create(true).append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    if !append || !exists {
        writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(file)
}

/// Trains on a caller-supplied problem.
pub fn train_problem(
    config: TrainConfig,
    problem: &ProblemSpec,
) -> Result<(NetParams, TrainHistory)> {
    let mut trainer = Trainer::new(config, problem)?;
    trainer.run()?;
    let (params, _, history) = trainer.into_parts();
    Ok((params, history))
}

/// Trains on the built-in problem named in the config.
pub fn train(config: TrainConfig) -> Result<(NetParams, TrainHistory)> {
    let problem = problems::by_name(&config.problem, config.d)?;
    train_problem(config, &problem)
}
