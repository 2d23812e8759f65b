//! Resolved run configuration. Built-in profile first, then a `key = value`
//! file, then command-line overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use clap::ValueEnum;
use lexcopy::experiment::ExperimentConfig;
use lexcopy::train::{ContextSource, LrSchedule};
use lexcopy::ModelConfig;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Desk-scale model that trains in seconds.
    Toy,
    /// Transformer-base dimensions; expressible, far too slow on a CPU.
    TransformerBase,
}

#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub profile: Profile,
    pub experiment: ExperimentConfig,
    pub vocab_size: usize,
    pub min_freq: usize,
}

pub const KEYS: &[&str] = &[
    "seed",
    "train_docs",
    "valid_docs",
    "test_docs",
    "n_concepts",
    "doc_len",
    "cue",
    "n_context",
    "beam",
    "length_penalty",
    "d_model",
    "n_layers",
    "heads",
    "d_ff",
    "dropout",
    "max_len",
    "vocab_size",
    "min_freq",
    "base.epochs",
    "base.lr_factor",
    "base.warmup",
    "base.max_tokens",
    "base.label_smoothing",
    "finetune.epochs",
    "finetune.lr",
    "finetune.max_tokens",
    "finetune.label_smoothing",
    "finetune.full",
    "finetune.context_source",
    "finetune.gate_warmup_epochs",
    "finetune.gate_warmup_value",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Usage> {
    value
        .parse()
        .map_err(|_| Usage(format!("invalid value {value:?} for {key}")))
}

impl Settings {
    pub fn new(profile: Profile) -> Self {
        let mut experiment = ExperimentConfig::default();
        if profile == Profile::TransformerBase {
            experiment.model = ModelConfig::transformer_base();
        }
        Settings {
            profile,
            experiment,
            vocab_size: 10_000,
            min_freq: 1,
        }
    }

    pub fn seed(&self) -> u64 {
        self.experiment.seed
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Usage> {
        let e = &mut self.experiment;
        match key {
            "seed" => e.seed = parse(key, value)?,
            "train_docs" => e.train_docs = parse(key, value)?,
            "valid_docs" => e.valid_docs = parse(key, value)?,
            "test_docs" => e.test_docs = parse(key, value)?,
            "n_concepts" => e.n_concepts = parse(key, value)?,
            "doc_len" => e.doc_len = parse(key, value)?,
            "cue" => e.cue = parse(key, value)?,
            "n_context" => e.n_context = parse(key, value)?,
            "beam" => e.beam = parse(key, value)?,
            "length_penalty" => e.length_penalty = parse(key, value)?,
            "d_model" => e.model.d_model = parse(key, value)?,
            "n_layers" => e.model.n_layers = parse(key, value)?,
            "heads" => e.model.heads = parse(key, value)?,
            "d_ff" => e.model.d_ff = parse(key, value)?,
            "dropout" => e.model.dropout = parse(key, value)?,
            "max_len" => e.model.max_len = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "min_freq" => self.min_freq = parse(key, value)?,
            "base.epochs" => e.base.epochs = parse(key, value)?,
            "base.lr_factor" | "base.warmup" => {
                let LrSchedule::InverseSqrt { factor, warmup } = &mut e.base.schedule else {
                    return Err(Usage("base schedule is not inverse-sqrt".into()));
                };
                if key == "base.warmup" {
                    *warmup = parse(key, value)?;
                } else {
                    *factor = parse(key, value)?;
                }
            }
            "base.max_tokens" => e.base.max_tokens = parse(key, value)?,
            "base.label_smoothing" => e.base.label_smoothing = parse(key, value)?,
            "finetune.epochs" => e.finetune.epochs = parse(key, value)?,
            "finetune.lr" => e.finetune.schedule = LrSchedule::Constant { lr: parse(key, value)? },
            "finetune.max_tokens" => e.finetune.max_tokens = parse(key, value)?,
            "finetune.label_smoothing" => e.finetune.label_smoothing = parse(key, value)?,
            "finetune.full" => e.finetune.full_finetune = parse(key, value)?,
            "finetune.context_source" => {
                e.finetune.context_source = match value {
                    "gold" => ContextSource::Gold,
                    "generated" => ContextSource::Generated,
                    _ => return Err(Usage(format!("context_source must be gold or generated, got {value:?}"))),
                }
            }
            "finetune.gate_warmup_epochs" => e.finetune.gate_warmup_epochs = parse(key, value)?,
            "finetune.gate_warmup_value" => e.finetune.gate_warmup_value = parse(key, value)?,
            _ => {
                return Err(Usage(format!(
                    "unknown setting {key:?}; known settings: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Usage> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read config file {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Usage(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), Usage> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects key=value, got {pair:?}")))?;
        self.set(key.trim(), value.trim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_settable() {
        for key in KEYS {
            let value = match *key {
                "finetune.full" | "cue" => "true",
                "finetune.context_source" => "generated",
                "dropout" | "length_penalty" | "base.lr_factor" | "finetune.lr" | "base.label_smoothing"
                | "finetune.label_smoothing" | "finetune.gate_warmup_value" => "0.5",
                _ => "3",
            };
            Settings::new(Profile::Toy).set(key, value).unwrap();
        }
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nseed = 5\nbeam=4  # trailing\n").unwrap();
        let mut s = Settings::new(Profile::Toy);
        s.apply_file(&path).unwrap();
        s.apply_override("beam=2").unwrap();
        assert_eq!((s.seed(), s.experiment.beam), (5, 2));
        assert!(s.apply_override("nope=1").is_err());
        assert!(s.apply_override("beam=x").is_err());
    }
}
