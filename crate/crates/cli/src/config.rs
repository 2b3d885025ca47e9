//! Run configuration files.
//!
//! One `key = value` pair per line; `#` starts a comment. Unknown keys,
//! duplicates and malformed values are errors that carry the line number.
//!
//! | key                 | default                                 |
//! |---------------------|-----------------------------------------|
//! | `problem`           | required: `bsb`, `hjb` or `ac`          |
//! | `d`                 | required                                |
//! | `N`                 | 50                                      |
//! | `M`                 | 100                                     |
//! | `hidden`            | `256,256,256,256`                       |
//! | `activation`        | `sine`                                  |
//! | `seed`              | 1 (high bit must be clear)              |
//! | `schedule`          | `20000@1e-3,30000@1e-4,30000@1e-5,20000@1e-6` |
//! | `log_every`         | 100                                     |
//! | `checkpoint`        | `<output_dir>/checkpoint.fbsn`          |
//! | `output_dir`        | `out`                                   |
//! | `input_shift`       | none (comma list of 1+d values)         |
//! | `input_scale`       | none (comma list of 1+d values)         |
//! | `m_test`            | 100                                     |
//! | `test_seed`         | `seed` with the high bit set            |
//! | `oracle_samples`    | 10000                                   |
//! | `y0_oracle_samples` | 100000                                  |
//! | `oracle_seed`       | 7                                       |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fbsnn::net::InputScaling;
use fbsnn::trainer::{Stage, TrainConfig};
use fbsnn::Activation;

use crate::CliError;

/// Seeds with this bit set belong to the evaluation namespace.
pub const TEST_SEED_BIT: u64 = 1 << 63;

const KEYS: [&str; 18] = [
    "problem",
    "d",
    "N",
    "M",
    "hidden",
    "activation",
    "seed",
    "schedule",
    "log_every",
    "checkpoint",
    "output_dir",
    "input_shift",
    "input_scale",
    "m_test",
    "test_seed",
    "oracle_samples",
    "y0_oracle_samples",
    "oracle_seed",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub m_test: usize,
    pub test_seed: u64,
    pub oracle_samples: usize,
    pub y0_oracle_samples: usize,
    pub oracle_seed: u64,
}

impl RunConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.train
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoint.fbsn"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.output_dir.join("train_log.csv")
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "problem = {}", t.problem);
        let _ = writeln!(s, "d = {}", t.d);
        let _ = writeln!(s, "N = {}", t.steps);
        let _ = writeln!(s, "M = {}", t.batch);
        let _ = writeln!(
            s,
            "hidden = {}",
            t.hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(s, "activation = {}", t.activation);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(
            s,
            "schedule = {}",
            t.schedule
                .iter()
                .map(|st| format!("{}@{}", st.iterations, st.learning_rate))
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(s, "log_every = {}", t.log_every);
        if let Some(p) = &t.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", p.display());
        }
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        if let Some(sc) = &t.input_scaling {
            let _ = writeln!(s, "input_shift = {}", list(&sc.shift));
            let _ = writeln!(s, "input_scale = {}", list(&sc.scale));
        }
        let _ = writeln!(s, "m_test = {}", self.m_test);
        let _ = writeln!(s, "test_seed = {}", self.test_seed);
        let _ = writeln!(s, "oracle_samples = {}", self.oracle_samples);
        let _ = writeln!(s, "y0_oracle_samples = {}", self.y0_oracle_samples);
        let _ = writeln!(s, "oracle_seed = {}", self.oracle_seed);
        s
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        line: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_str(&text)
}

fn err(line: usize, message: impl Into<String>) -> CliError {
    CliError::Config {
        line: Some(line),
        message: message.into(),
    }
}

fn value<T: FromStr>(raw: &str, key: &str, line: usize) -> Result<T, CliError> {
    raw.parse().map_err(|_| {
        err(
            line,
            format!(
                "'{key}' expects {}, got '{raw}'",
                std::any::type_name::<T>()
            ),
        )
    })
}

fn list<T: FromStr>(raw: &str, key: &str, line: usize) -> Result<Vec<T>, CliError> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|s| value(s.trim(), key, line)).collect()
}

fn schedule(raw: &str, line: usize) -> Result<Vec<Stage>, CliError> {
    raw.split(',')
        .map(|entry| {
            let entry = entry.trim();
            let (its, lr) = entry.split_once('@').ok_or_else(|| {
                err(
                    line,
                    format!("schedule entry '{entry}' must look like ITERATIONS@RATE"),
                )
            })?;
            let iterations: usize = value(its.trim(), "schedule", line)?;
            let learning_rate: f64 = value(lr.trim(), "schedule", line)?;
            if iterations == 0 {
                return Err(err(
                    line,
                    format!("schedule entry '{entry}' has zero iterations"),
                ));
            }
            if !(learning_rate > 0.0 && learning_rate.is_finite()) {
                return Err(err(
                    line,
                    format!("schedule entry '{entry}' needs a positive learning rate"),
                ));
            }
            Ok(Stage {
                iterations,
                learning_rate,
            })
        })
        .collect()
}

pub fn parse_str(text: &str) -> Result<RunConfig, CliError> {
    let mut train = TrainConfig::full_scale("", 0);
    train.seed = 1;
    let mut cfg = RunConfig {
        train,
        output_dir: PathBuf::from("out"),
        m_test: 100,
        test_seed: 0,
        oracle_samples: 10_000,
        y0_oracle_samples: 100_000,
        oracle_seed: 7,
    };
    let mut seen = BTreeSet::new();
    let mut lines_of = std::collections::BTreeMap::new();
    let (mut shift, mut scale): (Option<Vec<f64>>, Option<Vec<f64>>) = (None, None);
    let mut test_seed = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        let (key, raw) = content
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected 'key = value', got '{content}'")))?;
        let (key, raw) = (key.trim(), raw.trim());
        if !KEYS.contains(&key) {
            return Err(err(line, format!("unknown key '{key}'")));
        }
        if !seen.insert(key.to_string()) {
            return Err(err(line, format!("duplicate key '{key}'")));
        }
        lines_of.insert(key, line);
        let t = &mut cfg.train;
        match key {
            "problem" => t.problem = raw.to_string(),
            "d" => t.d = value(raw, key, line)?,
            "N" => t.steps = value(raw, key, line)?,
            "M" => t.batch = value(raw, key, line)?,
            "hidden" => t.hidden = list(raw, key, line)?,
            "activation" => {
                t.activation = raw
                    .parse::<Activation>()
                    .map_err(|e| err(line, e.to_string()))?
            }
            "seed" => t.seed = value(raw, key, line)?,
            "schedule" => t.schedule = schedule(raw, line)?,
            "log_every" => t.log_every = value(raw, key, line)?,
            "checkpoint" => t.checkpoint = Some(PathBuf::from(raw)),
            "output_dir" => cfg.output_dir = PathBuf::from(raw),
            "input_shift" => shift = Some(list(raw, key, line)?),
            "input_scale" => scale = Some(list(raw, key, line)?),
            "m_test" => cfg.m_test = value(raw, key, line)?,
            "test_seed" => test_seed = Some(value(raw, key, line)?),
            "oracle_samples" => cfg.oracle_samples = value(raw, key, line)?,
            "y0_oracle_samples" => cfg.y0_oracle_samples = value(raw, key, line)?,
            "oracle_seed" => cfg.oracle_seed = value(raw, key, line)?,
            _ => unreachable!("key list checked above"),
        }
    }

    let at = |key: &str| lines_of.get(key).copied();
    let fail = |key: &str, message: String| CliError::Config {
        line: at(key),
        message,
    };
    for required in ["problem", "d"] {
        if !seen.contains(required) {
            return Err(CliError::Config {
                line: None,
                message: format!("missing required key '{required}'"),
            });
        }
    }
    if !fbsnn::problems::PROBLEM_NAMES.contains(&cfg.train.problem.as_str()) {
        return Err(fail(
            "problem",
            format!(
                "unknown problem '{}' (expected one of {})",
                cfg.train.problem,
                fbsnn::problems::PROBLEM_NAMES.join(", ")
            ),
        ));
    }
    if cfg.train.seed & TEST_SEED_BIT != 0 {
        return Err(fail(
            "seed",
            "training seed must have the high bit clear".into(),
        ));
    }
    cfg.test_seed = test_seed.unwrap_or(cfg.train.seed | TEST_SEED_BIT);
    if cfg.test_seed & TEST_SEED_BIT == 0 {
        return Err(fail(
            "test_seed",
            format!(
                "test seed {} collides with the training seed namespace (high bit must be set)",
                cfg.test_seed
            ),
        ));
    }
    match (shift, scale) {
        (None, None) => {}
        (Some(shift), Some(scale)) => {
            let n = cfg.train.d + 1;
            if shift.len() != n || scale.len() != n {
                return Err(fail(
                    "input_shift",
                    format!("input_shift and input_scale need {n} entries each"),
                ));
            }
            cfg.train.input_scaling = Some(InputScaling { shift, scale });
        }
        _ => {
            return Err(CliError::Config {
                line: at("input_shift").or(at("input_scale")),
                message: "input_shift and input_scale must be given together".into(),
            })
        }
    }
    if cfg.m_test == 0 {
        return Err(fail("m_test", "m_test must be >= 1".into()));
    }
    if cfg.oracle_samples == 0 || cfg.y0_oracle_samples == 0 {
        return Err(fail(
            "oracle_samples",
            "oracle sample counts must be >= 1".into(),
        ));
    }
    if cfg.train.problem == "bsb" && !cfg.train.d.is_multiple_of(2) {
        return Err(fail(
            "d",
            format!("bsb needs an even dimension, got {}", cfg.train.d),
        ));
    }
    cfg.train.validate().map_err(|e| {
        let key = match &e {
            fbsnn::Error::Config(m) if m.contains("schedule") => "schedule",
            fbsnn::Error::Config(m) if m.contains("hidden") => "hidden",
            fbsnn::Error::Config(m) if m.contains("log") => "log_every",
            _ => "d",
        };
        fail(key, e.to_string())
    })?;
    Ok(cfg)
}
