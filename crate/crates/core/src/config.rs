//! Flat `key = value` run configuration. Defaults, then a config file, then
//! command-line overrides; `WFE_SEED` supplies the seed when neither sets it.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::beam::DecodeMode;
use crate::corpus::SyntheticConfig;
use crate::error::{Error, Result};
use crate::metrics::Basis;
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::wfe::WfeLossConfig;

pub const SEED_ENV: &str = "WFE_SEED";
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: WfeLossConfig,
    pub train: TrainConfig,
    pub data: SyntheticConfig,
    pub vocab_size: usize,
    pub beam: usize,
    pub mode: DecodeMode,
    pub max_len: Option<usize>,
    pub byte_limit: Option<usize>,
    pub basis: Basis,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: WfeLossConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticConfig::default(),
            vocab_size: 200,
            beam: 5,
            mode: DecodeMode::Baseline,
            max_len: None,
            byte_limit: None,
            basis: Basis::F1,
            seed: DEFAULT_SEED,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Defaults with the seed taken from `WFE_SEED` when set.
    pub fn from_env() -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "embed_dim" => self.model.embed_dim = parse(key, v)?,
            "hidden_dim" => self.model.hidden_dim = parse(key, v)?,
            "wfe_bias" => self.model.wfe_bias = parse(key, v)?,
            "epsilon" => self.loss.epsilon = parse(key, v)?,
            "exponent" => self.loss.exponent = parse(key, v)?,
            "c1" => self.loss.c1 = parse(key, v)?,
            "c2" => self.loss.c2 = parse(key, v)?,
            "adam_epochs" => self.train.adam_epochs = parse(key, v)?,
            "lr_adam" => self.train.lr_adam = parse(key, v)?,
            "lr_sgd" => self.train.lr_sgd = parse(key, v)?,
            "clip_adam" => self.train.clip_adam = parse(key, v)?,
            "clip_sgd" => self.train.clip_sgd = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "epochs" | "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "dropout" => {
                self.train.dropout = parse(key, v)?;
                self.model.dropout = self.train.dropout;
            }
            "wfe_weight" => self.train.wfe_weight = parse(key, v)?,
            "timing" => self.train.timing = parse(key, v)?,
            "pairs" => self.data.pairs = parse(key, v)?,
            "content_words" => self.data.content_words = parse(key, v)?,
            "filler_words" => self.data.filler_words = parse(key, v)?,
            "min_content" => self.data.min_content = parse(key, v)?,
            "max_content" => self.data.max_content = parse(key, v)?,
            "max_fillers" => self.data.max_fillers = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "beam" => self.beam = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "max_len" => self.max_len = parse_opt(key, v)?,
            "byte_limit" => self.byte_limit = parse_opt(key, v)?,
            "basis" => self.basis = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        self.apply_text(&text)
    }

    /// Propagates the shared seed into the components that use it.
    pub fn finish(mut self) -> Self {
        self.train.seed = self.seed;
        self.data.seed = self.seed;
        self
    }
}
