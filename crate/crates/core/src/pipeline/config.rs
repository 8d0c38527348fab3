//! Run configuration: a flat TOML key/value file, overridable key by key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::entangle::PeStrategy;
use crate::error::{Error, Result};
use crate::heads::Side;
use crate::model::ModelConfig;

pub const SEED_ENV: &str = "ENTANGLER_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Ner,
    Pos,
    Classify,
    Pretrain,
}

impl Task {
    pub fn is_labeling(self) -> bool {
        matches!(self, Task::Ner | Task::Pos)
    }

    /// Name of the dev-selection metric.
    pub fn primary_metric(self) -> &'static str {
        match self {
            Task::Ner => "f1",
            Task::Pos => "accuracy",
            Task::Classify => "macro_f1",
            Task::Pretrain => "loss",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ner" => Ok(Task::Ner),
            "pos" => Ok(Task::Pos),
            "classify" => Ok(Task::Classify),
            "pretrain" => Ok(Task::Pretrain),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ner => "ner",
            Task::Pos => "pos",
            Task::Classify => "classify",
            Task::Pretrain => "pretrain",
        })
    }
}

/// Everything a run needs. Unset keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub side: Side,

    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub num_coattention: usize,
    pub pe_strategy: PeStrategy,
    pub dropout: f64,
    pub max_subwords: usize,
    pub max_chars: usize,
    pub init_std: f64,

    pub lr: f64,
    /// Defaults to 25 for classification and 50 otherwise.
    pub epochs: Option<usize>,
    /// Exact number of optimizer steps; replaces `epochs` when set.
    pub max_steps: Option<usize>,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,

    pub num_merges: usize,
    pub mask_rate: f64,

    pub train_file: Option<PathBuf>,
    pub dev_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub subword_vocab: Option<PathBuf>,
    pub char_vocab: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    /// Pretrained checkpoint whose matching tensors seed the model.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            task: Task::Ner,
            side: Side::Subword,
            hidden_size: m.hidden_size,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            ffn_size: m.ffn_size,
            num_coattention: m.num_coattention,
            pe_strategy: m.pe_strategy,
            dropout: m.dropout,
            max_subwords: m.max_subwords,
            max_chars: m.max_chars,
            init_std: m.init_std,
            lr: 2e-5,
            epochs: None,
            max_steps: None,
            warmup_steps: 0,
            batch_size: 16,
            seed: 42,
            max_grad_norm: None,
            num_merges: 1000,
            mask_rate: 0.15,
            train_file: None,
            dev_file: None,
            test_file: None,
            subword_vocab: None,
            char_vocab: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            init_checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            num_coattention: self.num_coattention,
            pe_strategy: self.pe_strategy,
            dropout: self.dropout,
            max_subwords: self.max_subwords,
            max_chars: self.max_chars,
            init_std: self.init_std,
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.task {
            Task::Classify => 25,
            _ => 50,
        })
    }

    /// Parses `text`, then applies `key=value` overrides in order.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            table.insert(key.trim().to_string(), parse_override_value(raw.trim()));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults), applies overrides and then the
    /// seed environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_with_overrides(&text, overrides)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an integer")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        self.model().encoder(1, 1).validate()?;
        self.model().coattention().validate()
    }
}

/// Interprets an override as a TOML value, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_task() {
        let c = RunConfig::from_toml_with_overrides("", &[]).unwrap();
        assert_eq!(c.lr, 2e-5);
        assert_eq!(c.epochs(), 50);
        assert_eq!(c.batch_size, 16);
        let c = RunConfig::from_toml_with_overrides("task = \"classify\"", &[]).unwrap();
        assert_eq!(c.epochs(), 25);
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::from_toml_with_overrides(
            "hidden_size = 32\nside = \"subw\"",
            &[
                "hidden_size=16".into(),
                "side=char".into(),
                "pe_strategy=c".into(),
                "lr=1e-3".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.hidden_size, 16);
        assert_eq!(c.side, Side::Char);
        assert_eq!(c.pe_strategy, PeStrategy::C);
        assert_eq!(c.lr, 1e-3);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_toml_with_overrides("", &["bogus=1".into()]).is_err());
        assert!(RunConfig::from_toml_with_overrides("", &["novalue".into()]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_with_overrides("", &["num_heads=3".into()]).is_err());
        assert!(RunConfig::from_toml_with_overrides("", &["num_coattention=0".into()]).is_err());
        assert!(RunConfig::from_toml_with_overrides("", &["batch_size=0".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig {
            train_file: Some("a.conll".into()),
            epochs: Some(3),
            ..RunConfig::default()
        };
        let back = RunConfig::from_toml_with_overrides(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
