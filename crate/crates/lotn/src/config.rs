//! Run configuration: every knob the pipeline reads, with the defaults
//! used for the reported experiments. Values come from a flat key=value
//! file, then CLI flags override; unknown keys are rejected up front so a
//! typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::Variant;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("config key {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("config key {key} = {value}: {reason}")]
    Invalid { key: &'static str, value: String, reason: &'static str },
    #[error("missing required setting {key:?} for this command")]
    Missing { key: &'static str },
}

/// Everything a run needs. Path fields stay optional here and are demanded
/// per command; numeric fields always hold a value so the manifest echo is
/// complete.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // inputs and artifacts
    pub towe_train: Option<PathBuf>,
    pub towe_test: Option<PathBuf>,
    pub reviews_train: Option<PathBuf>,
    pub reviews_dev: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub sentiment_checkpoint: Option<PathBuf>,
    pub model_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,

    // model shape
    pub word_dim: usize,
    pub pos_dim: usize,
    pub hidden: usize,
    /// Hidden size of the sentiment classifier's BiLSTM.
    pub sc_hidden: usize,
    /// Position-embedding table size; distances clip to l_max - 1.
    pub l_max: usize,
    /// Reviews are truncated to this many tokens before pretraining.
    pub review_max_len: usize,

    // optimization
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub variant: Variant,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_patience: usize,
    pub train_epochs: usize,
    pub train_patience: usize,
    /// Share of the training file held out for early stopping.
    pub dev_fraction: f64,

    // evaluation and sweeps
    /// Randomization-test resamples for `evaluate --compare`.
    pub shuffles: usize,
    /// Seeds averaged per sweep row; empty means "just `seed`".
    pub seeds: Vec<u64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_step: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            towe_train: None,
            towe_test: None,
            reviews_train: None,
            reviews_dev: None,
            embeddings: None,
            sentiment_checkpoint: None,
            model_checkpoint: None,
            out_dir: PathBuf::from("out"),
            word_dim: 300,
            pos_dim: 300,
            hidden: 200,
            sc_hidden: 200,
            l_max: 100,
            review_max_len: 100,
            dropout: 0.5,
            lr: 0.001,
            batch_size: 25,
            lambda: 0.2,
            variant: Variant::Lotn,
            seed: 1,
            pretrain_epochs: 30,
            pretrain_patience: 3,
            train_epochs: 100,
            train_patience: 5,
            dev_fraction: 0.2,
            shuffles: 10_000,
            seeds: Vec::new(),
            lambda_min: 0.05,
            lambda_max: 0.95,
            lambda_step: 0.05,
        }
    }
}

fn parse_seeds(value: &str) -> Result<Vec<u64>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|e| format!("bad seed {s:?}: {e}")))
        .collect()
}

impl RunConfig {
    /// Loads a key=value file over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = RunConfig::default();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected key=value, found {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one setting by key name; the single entry point for both the
    /// file parser and CLI-flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parsed<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("cannot parse {value:?}: {e}"),
            })
        }

        match key {
            "towe_train" => self.towe_train = Some(PathBuf::from(value)),
            "towe_test" => self.towe_test = Some(PathBuf::from(value)),
            "reviews_train" => self.reviews_train = Some(PathBuf::from(value)),
            "reviews_dev" => self.reviews_dev = Some(PathBuf::from(value)),
            "embeddings" => self.embeddings = Some(PathBuf::from(value)),
            "sentiment_checkpoint" => self.sentiment_checkpoint = Some(PathBuf::from(value)),
            "model_checkpoint" => self.model_checkpoint = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "word_dim" => self.word_dim = parsed(key, value)?,
            "pos_dim" => self.pos_dim = parsed(key, value)?,
            "hidden" => self.hidden = parsed(key, value)?,
            "sc_hidden" => self.sc_hidden = parsed(key, value)?,
            "l_max" => self.l_max = parsed(key, value)?,
            "review_max_len" => self.review_max_len = parsed(key, value)?,
            "dropout" => self.dropout = parsed(key, value)?,
            "lr" => self.lr = parsed(key, value)?,
            "batch_size" => self.batch_size = parsed(key, value)?,
            "lambda" => self.lambda = parsed(key, value)?,
            "variant" => {
                self.variant = value.parse().map_err(|e| ConfigError::BadValue {
                    key: key.to_string(),
                    reason: e,
                })?
            }
            "seed" => self.seed = parsed(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parsed(key, value)?,
            "pretrain_patience" => self.pretrain_patience = parsed(key, value)?,
            "train_epochs" => self.train_epochs = parsed(key, value)?,
            "train_patience" => self.train_patience = parsed(key, value)?,
            "dev_fraction" => self.dev_fraction = parsed(key, value)?,
            "shuffles" => self.shuffles = parsed(key, value)?,
            "seeds" => {
                self.seeds = parse_seeds(value).map_err(|reason| ConfigError::BadValue {
                    key: key.to_string(),
                    reason,
                })?
            }
            "lambda_min" => self.lambda_min = parsed(key, value)?,
            "lambda_max" => self.lambda_max = parsed(key, value)?,
            "lambda_step" => self.lambda_step = parsed(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    /// Semantic checks, run once after file + flag merging and before any
    /// stage touches data or model state.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn require(cond: bool, key: &'static str, value: String, reason: &'static str) -> Result<(), ConfigError> {
            if cond {
                Ok(())
            } else {
                Err(ConfigError::Invalid { key, value, reason })
            }
        }

        require(self.word_dim >= 1, "word_dim", self.word_dim.to_string(), "must be at least 1")?;
        require(self.pos_dim >= 1, "pos_dim", self.pos_dim.to_string(), "must be at least 1")?;
        require(self.hidden >= 1, "hidden", self.hidden.to_string(), "must be at least 1")?;
        require(self.sc_hidden >= 1, "sc_hidden", self.sc_hidden.to_string(), "must be at least 1")?;
        require(self.l_max >= 2, "l_max", self.l_max.to_string(), "table needs the 0 and 1 rows")?;
        require(
            self.review_max_len >= 1,
            "review_max_len",
            self.review_max_len.to_string(),
            "must be at least 1",
        )?;
        require(
            (0.0..1.0).contains(&self.dropout),
            "dropout",
            self.dropout.to_string(),
            "must lie in [0, 1)",
        )?;
        require(
            self.lr.is_finite() && self.lr > 0.0,
            "lr",
            self.lr.to_string(),
            "must be positive and finite",
        )?;
        require(self.batch_size >= 1, "batch_size", self.batch_size.to_string(), "must be at least 1")?;
        require(
            self.lambda.is_finite() && self.lambda >= 0.0,
            "lambda",
            self.lambda.to_string(),
            "must be non-negative and finite",
        )?;
        require(
            self.pretrain_epochs >= 1,
            "pretrain_epochs",
            self.pretrain_epochs.to_string(),
            "must be at least 1",
        )?;
        require(
            self.train_epochs >= 1,
            "train_epochs",
            self.train_epochs.to_string(),
            "must be at least 1",
        )?;
        require(
            self.dev_fraction > 0.0 && self.dev_fraction < 1.0,
            "dev_fraction",
            self.dev_fraction.to_string(),
            "must lie strictly inside (0, 1)",
        )?;
        require(self.shuffles >= 1, "shuffles", self.shuffles.to_string(), "must be at least 1")?;
        require(
            self.lambda_min > 0.0 && self.lambda_max < 1.0 && self.lambda_min <= self.lambda_max,
            "lambda_min",
            format!("{}..{}", self.lambda_min, self.lambda_max),
            "sweep grid must lie strictly inside (0, 1)",
        )?;
        require(
            self.lambda_step > 0.0 && self.lambda_step.is_finite(),
            "lambda_step",
            self.lambda_step.to_string(),
            "must be positive and finite",
        )?;
        Ok(())
    }

    /// Seeds a sweep averages over; defaults to the run seed.
    pub fn effective_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// The λ sweep grid: lambda_min, lambda_min + step, ... up to
    /// lambda_max (inclusive, with a small tolerance for float drift).
    pub fn lambda_grid(&self) -> Vec<f64> {
        let mut grid = Vec::new();
        let mut i = 0usize;
        loop {
            let v = self.lambda_min + i as f64 * self.lambda_step;
            if v > self.lambda_max + 1e-9 {
                break;
            }
            grid.push(v);
            i += 1;
        }
        grid
    }

    /// Every setting as (key, value) pairs, in declaration order — the
    /// manifest echo. Unset paths are omitted.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut path = |key: &str, v: &Option<PathBuf>| {
            if let Some(p) = v {
                pairs.push((key.to_string(), p.display().to_string()));
            }
        };
        path("towe_train", &self.towe_train);
        path("towe_test", &self.towe_test);
        path("reviews_train", &self.reviews_train);
        path("reviews_dev", &self.reviews_dev);
        path("embeddings", &self.embeddings);
        path("sentiment_checkpoint", &self.sentiment_checkpoint);
        path("model_checkpoint", &self.model_checkpoint);
        let mut push = |key: &str, value: String| pairs.push((key.to_string(), value));
        push("out_dir", self.out_dir.display().to_string());
        push("word_dim", self.word_dim.to_string());
        push("pos_dim", self.pos_dim.to_string());
        push("hidden", self.hidden.to_string());
        push("sc_hidden", self.sc_hidden.to_string());
        push("l_max", self.l_max.to_string());
        push("review_max_len", self.review_max_len.to_string());
        push("dropout", format!("{:?}", self.dropout));
        push("lr", format!("{:?}", self.lr));
        push("batch_size", self.batch_size.to_string());
        push("lambda", format!("{:?}", self.lambda));
        push("variant", self.variant.to_string());
        push("seed", self.seed.to_string());
        push("pretrain_epochs", self.pretrain_epochs.to_string());
        push("pretrain_patience", self.pretrain_patience.to_string());
        push("train_epochs", self.train_epochs.to_string());
        push("train_patience", self.train_patience.to_string());
        push("dev_fraction", format!("{:?}", self.dev_fraction));
        push("shuffles", self.shuffles.to_string());
        if !self.seeds.is_empty() {
            let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
            push("seeds", seeds.join(","));
        }
        push("lambda_min", format!("{:?}", self.lambda_min));
        push("lambda_max", format!("{:?}", self.lambda_max));
        push("lambda_step", format!("{:?}", self.lambda_step));
        pairs
    }

    /// Demands a path that the current command cannot run without.
    pub fn require_path<'a>(
        field: &'a Option<PathBuf>,
        key: &'static str,
    ) -> Result<&'a Path, ConfigError> {
        field.as_deref().ok_or(ConfigError::Missing { key })
    }
}
