//! Flat key=value run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment; blank lines are
//! ignored. Every key is optional and falls back to the desk-scale default,
//! so an empty file is a valid configuration.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use crate::encoders::ModelConfig;
use crate::fusion::Strategy;
use crate::train::{Stage, TrainConfig, TrainError};

/// Errors raised while loading a configuration file.
#[derive(Debug)]
pub enum ConfigError {
    /// Filesystem failure.
    Io { path: PathBuf, source: io::Error },
    /// A line that cannot be understood.
    Parse { path: PathBuf, line: usize, detail: String },
    /// Keys parsed but the resulting configuration is inconsistent.
    Invalid { detail: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => {
                write!(f, "config io error at {}: {source}", path.display())
            }
            ConfigError::Parse { path, line, detail } => {
                write!(f, "{}:{line}: {detail}", path.display())
            }
            ConfigError::Invalid { detail } => write!(f, "invalid config: {detail}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Everything a command run needs: model geometry, training settings, and
/// the filesystem locations the subcommands read and write.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Model geometry.
    pub model: ModelConfig,
    /// Training stage, when the file pins one.
    pub stage: Option<Stage>,
    /// Fusion strategy.
    pub strategy: Strategy,
    /// Adam learning rate.
    pub lr: f64,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Epochs for the stage being run; unset means the stage default.
    pub epochs: Option<usize>,
    /// Master seed.
    pub seed: u64,
    /// Dataset directory (holding `manifest.jsonl` and `vocab.txt`).
    pub data_dir: Option<PathBuf>,
    /// Checkpoint to start from or to evaluate.
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            model: ModelConfig::desk(),
            stage: None,
            strategy: Strategy::Tgis,
            lr: 1e-3,
            batch_size: 32,
            epochs: None,
            seed: 0,
            data_dir: None,
            checkpoint: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Resolve the training settings for `stage`, applying the stage's
    /// default epoch count when the file left `epochs` unset.
    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            strategy: self.strategy,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs.unwrap_or_else(|| stage.default_epochs()),
            seed: self.seed,
        }
    }

    /// Load and validate a configuration file.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Parse {
                    path: path.to_owned(),
                    line,
                    detail: format!("expected 'key = value', got '{content}'"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::Parse {
                    path: path.to_owned(),
                    line,
                    detail: format!("duplicate key '{key}'"),
                });
            }
            seen.push(key.to_owned());
            cfg.apply(key, value).map_err(|detail| ConfigError::Parse {
                path: path.to_owned(),
                line,
                detail,
            })?;
        }
        cfg.model
            .validate()
            .map_err(|e| ConfigError::Invalid { detail: e.to_string() })?;
        cfg.train_config(cfg.stage.unwrap_or(Stage::Finetune))
            .validate()
            .map_err(|e: TrainError| ConfigError::Invalid { detail: e.to_string() })?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("bad value '{value}' for key '{key}'"))
        }
        match key {
            "n" => self.model.n = num(key, value)?,
            "h" => self.model.h = num(key, value)?,
            "w" => self.model.w = num(key, value)?,
            "n1" => self.model.enc.n1 = num(key, value)?,
            "h1" => self.model.enc.h1 = num(key, value)?,
            "w1" => self.model.enc.w1 = num(key, value)?,
            "pool" => self.model.enc.pool = num(key, value)?,
            "d" => self.model.enc.d = num(key, value)?,
            "l2d" => self.model.enc.l2d = num(key, value)?,
            "dt" => self.model.enc.dt = num(key, value)?,
            "mixing" => {
                self.model.enc.mixing = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(format!("bad value '{value}' for key 'mixing'")),
                }
            }
            "d_dec" => self.model.dec.d_dec = num(key, value)?,
            "vocab" => self.model.dec.vocab = num(key, value)?,
            "max_len" => self.model.dec.max_len = num(key, value)?,
            "stage" => {
                self.stage = Some(
                    Stage::parse(value)
                        .ok_or_else(|| format!("bad value '{value}' for key 'stage'"))?,
                )
            }
            "strategy" => {
                self.strategy = value
                    .parse()
                    .map_err(|_| format!("bad value '{value}' for key 'strategy'"))?
            }
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = Some(num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_text(text: &str) -> Result<RunConfig, ConfigError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, text).unwrap();
        RunConfig::load(&path)
    }

    #[test]
    fn empty_file_yields_desk_defaults() {
        let cfg = load_text("").unwrap();
        assert_eq!(cfg.model, ModelConfig::desk());
        assert_eq!(cfg.strategy, Strategy::Tgis);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.seed, 0);
        assert!(cfg.stage.is_none());
        assert!(cfg.data_dir.is_none());

        let pre = cfg.train_config(Stage::Pretrain);
        assert_eq!(pre.epochs, 1);
        let fine = cfg.train_config(Stage::Finetune);
        assert_eq!(fine.epochs, 2);
    }

    #[test]
    fn comments_and_values_parse() {
        let cfg = load_text(
            "# model\nn = 8\nh = 16\nw = 16\nn1 = 2\nh1 = 4\nw1 = 4\nd = 8  # hidden width\n\
             l2d = 4\ndt = 8\nd_dec = 8\nmixing = true\n\n\
             strategy = maxpool\nstage = pretrain\nlr = 0.01\nbatch_size = 4\n\
             epochs = 7\nseed = 99\ndata_dir = /tmp/data\n",
        )
        .unwrap();
        assert_eq!(cfg.model.n, 8);
        assert_eq!(cfg.model.enc.d, 8);
        assert!(cfg.model.enc.mixing);
        assert_eq!(cfg.strategy, Strategy::Maxpool);
        assert_eq!(cfg.stage, Some(Stage::Pretrain));
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.epochs, Some(7));
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.data_dir.as_deref(), Some(Path::new("/tmp/data")));
    }

    #[test]
    fn bad_lines_report_their_line_number() {
        let err = load_text("n = 32\nwhat is this\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error: {other}"),
        }
        let err = load_text("bogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        let err = load_text("lr = fast\n").unwrap_err();
        assert!(err.to_string().contains("bad value"));
        let err = load_text("n = 32\nn = 16\n").unwrap_err();
        assert!(err.to_string().contains("duplicate key"));
    }

    #[test]
    fn inconsistent_geometry_is_rejected() {
        let err = load_text("n = 10\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { .. }));
        let err = load_text("lr = -1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { .. }));
    }
}
