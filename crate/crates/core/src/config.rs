//! Run configuration: one JSON document covering model sizes, every training
//! stage, generation, paths and the HTTP service. Every section and field is
//! optional and falls back to the desk-scale defaults below.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{DecoderConfig, LmPretrainConfig, VisionEncoderConfig};
use crate::captioning::GenerationConfig;
use crate::error::{Error, Result};
use crate::training::{Stage1Config, TrainConfig};

/// Overrides `paths.checkpoint_dir` when set.
pub const CHECKPOINT_DIR_ENV: &str = "CAPRET_CHECKPOINT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionEncoderConfig,
    pub decoder_embed_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub context_len: usize,
    pub retrieval_dim: usize,
    pub vocab_min_count: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vision: VisionEncoderConfig::default(),
            decoder_embed_dim: 128,
            decoder_layers: 2,
            decoder_heads: 4,
            context_len: 64,
            retrieval_dim: 32,
            vocab_min_count: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn decoder(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            vocab_size,
            embed_dim: self.decoder_embed_dim,
            hidden_dim: self.decoder_embed_dim,
            n_layers: self.decoder_layers,
            n_heads: self.decoder_heads,
            context_len: self.context_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            manifest: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    pub default_k: usize,
    pub max_k: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            addr: "127.0.0.1:8080".into(),
            default_k: 10,
            max_k: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lm: LmPretrainConfig,
    pub stage1: Stage1Config,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub paths: PathsConfig,
    pub serve: ServeConfig,
}

impl RunConfig {
    /// Reads a JSON config file; unknown fields are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(CHECKPOINT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.paths.checkpoint_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.vision.validate()?;
        self.model.decoder(16).validate()?;
        if self.model.retrieval_dim == 0 {
            return Err(Error::config("model.retrieval_dim", "must be positive"));
        }
        if self.model.context_len < 8 {
            return Err(Error::config("model.context_len", "must be at least 8"));
        }
        if self.lm.batch_sequences == 0 {
            return Err(Error::config("lm.batch_sequences", "must be at least 1"));
        }
        if !(self.lm.lr >= 0.0 && self.lm.lr.is_finite()) {
            return Err(Error::config("lm.lr", "must be finite and non-negative"));
        }
        self.stage1.validate()?;
        self.train.validate()?;
        self.generation.validate(self.model.context_len)?;
        if self.serve.default_k == 0 || self.serve.default_k > self.serve.max_k {
            return Err(Error::config("serve.default_k", "must be in 1..=serve.max_k"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert_eq!(cfg.model.retrieval_dim, 32);
        assert_eq!(cfg.model.vision.embed_dim, 64);
        assert_eq!(cfg.model.decoder_embed_dim, 128);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"train": {"base_lr": 0.001}, "model": {"retrieval_dim": 8}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.base_lr, 0.001);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model.retrieval_dim, 8);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"train": {"base_lrr": 0.001}}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("base_lrr"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.model.retrieval_dim = 0;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.retrieval_dim"),
            other => panic!("{other:?}"),
        }
        let mut cfg = RunConfig::default();
        cfg.generation.max_new_tokens = 200;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
