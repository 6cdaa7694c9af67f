//! On-disk model layout and loading.
//!
//! ```text
//! <root>/vocab.json       vocabulary
//! <root>/backbones/       frozen networks (checkpoint container)
//! <root>/bridge/best/     bridge with the best validation mean recall
//! <root>/bridge/last/     bridge and training state after the last step
//! <root>/metrics.jsonl    one JSON record per logged evaluation
//! <root>/index/           retrieval index over the gallery images
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde_json::{json, Value};

use crate::backbones::{init_backbones, BackboneBundle, DecoderConfig, Params, VisionEncoderConfig};
use crate::bridge::Bridge;
use crate::checkpoint::{read_container, write_container};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::training::{load_checkpoint, BEST_DIR, LAST_DIR};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelDir {
    root: PathBuf,
}

impl ModelDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ModelDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn backbones(&self) -> PathBuf {
        self.root.join("backbones")
    }

    pub fn bridge(&self) -> PathBuf {
        self.root.join("bridge")
    }

    pub fn bridge_best(&self) -> PathBuf {
        self.bridge().join(BEST_DIR)
    }

    pub fn bridge_last(&self) -> PathBuf {
        self.bridge().join(LAST_DIR)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn index(&self) -> PathBuf {
        self.root.join("index")
    }
}

pub fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(vocab)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab: Vocabulary = serde_json::from_str(&text)?;
    let well_formed =
        vocab.len() >= 6 && Vocabulary::from_words(vocab.tokens()[5..vocab.len() - 1].iter().cloned()) == vocab;
    if !well_formed {
        return Err(Error::InvalidArgument(format!(
            "{} is not a valid vocabulary",
            path.display()
        )));
    }
    Ok(vocab)
}

pub fn save_backbones(backbones: &BackboneBundle<f32>, dir: &Path) -> Result<()> {
    let meta = json!({"vision": backbones.vision_cfg(), "decoder": backbones.decoder_cfg()});
    let tensors: Vec<(String, &Array2<f32>)> = backbones.named();
    write_container(dir, &tensors, &json!({}), &meta)
}

pub fn load_backbones(dir: &Path) -> Result<BackboneBundle<f32>> {
    let container = read_container::<f32>(dir)?;
    let parse = |key: &str| -> Result<Value> {
        container
            .meta
            .get(key)
            .cloned()
            .ok_or_else(|| Error::checkpoint(dir, format!("missing {key} configuration")))
    };
    let vision: VisionEncoderConfig =
        serde_json::from_value(parse("vision")?).map_err(|e| Error::checkpoint(dir, e.to_string()))?;
    let decoder: DecoderConfig =
        serde_json::from_value(parse("decoder")?).map_err(|e| Error::checkpoint(dir, e.to_string()))?;
    let template = init_backbones::<f32>(vision, decoder, 0)?;
    container.restore(&template, "", dir)
}

/// Everything needed to caption and retrieve.
#[derive(Clone, Debug, PartialEq)]
pub struct CapRetModel {
    pub backbones: BackboneBundle<f32>,
    pub bridge: Bridge<f32>,
    pub vocab: Vocabulary,
}

impl CapRetModel {
    /// Loads the vocabulary, the backbones and the best bridge.
    pub fn load(dir: &ModelDir) -> Result<Self> {
        let vocab = load_vocab(&dir.vocab())?;
        let backbones = load_backbones(&dir.backbones())?;
        let (bridge, _, _) = load_checkpoint::<f32>(&dir.bridge_best())?;
        Self::new(backbones, bridge, vocab)
    }

    pub fn new(backbones: BackboneBundle<f32>, bridge: Bridge<f32>, vocab: Vocabulary) -> Result<Self> {
        let dcfg = backbones.decoder_cfg();
        if dcfg.vocab_size != vocab.len() {
            return Err(Error::Shape(format!(
                "decoder has {} tokens, vocabulary has {}",
                dcfg.vocab_size,
                vocab.len()
            )));
        }
        let dims = bridge.dims();
        if dims.vision_dim != backbones.vision_cfg().embed_dim || dims.embed_dim != dcfg.embed_dim {
            return Err(Error::Shape(format!(
                "bridge expects m = {}, D = {}; backbones have m = {}, D = {}",
                dims.vision_dim,
                dims.embed_dim,
                backbones.vision_cfg().embed_dim,
                dcfg.embed_dim
            )));
        }
        Ok(CapRetModel {
            backbones,
            bridge,
            vocab,
        })
    }
}
