//! The stages of a full run, shared by the command-line tool and the
//! end-to-end tests: vocabulary and backbone initialization, language-model
//! pretraining of the decoder, contrastive encoder fine-tuning, and bridge
//! training with checkpoints and a metrics log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::backbones::{init_backbones, pretrain_language_model, BackboneBundle};
use crate::bridge::Bridge;
use crate::config::RunConfig;
use crate::data::{build_vocabulary, DatasetManifest, Split, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{save_backbones, save_vocab, ModelDir};
use crate::training::{
    encode_split, finetune_vision_encoder, load_checkpoint, load_encoder_split, train_bridge, CheckpointTarget,
    Stage1Report, TrainReport, TrainState,
};

/// Vocabulary over every caption of the manifest and freshly initialized
/// backbones sized to it.
pub fn init_model(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<(Vocabulary, BackboneBundle<f32>)> {
    cfg.validate()?;
    let vocab = build_vocabulary(manifest, cfg.model.vocab_min_count)?;
    let backbones = init_backbones(cfg.model.vision, cfg.model.decoder(vocab.len()), cfg.model.seed)?;
    Ok((vocab, backbones))
}

/// Tokenized captions of a split, grouped by image.
fn split_captions(vocab: &Vocabulary, manifest: &DatasetManifest, split: Split) -> Vec<Vec<TokenSequence>> {
    manifest
        .split(split)
        .map(|r| r.captions.iter().map(|c| vocab.tokenize(c, false)).collect())
        .collect()
}

/// Next-token pretraining of the decoder on training-split captions, with
/// the paraphrases of one image packed together.
pub fn pretrain_decoder(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    backbones: &mut BackboneBundle<f32>,
) -> Result<Vec<f64>> {
    let captions = split_captions(vocab, manifest, Split::Train);
    let curve = pretrain_language_model(&mut backbones.decoder, &captions, &cfg.lm)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        tracing::info!(
            steps = curve.len(),
            first_loss = first,
            last_loss = last,
            "language-model pretraining"
        );
    }
    Ok(curve)
}

/// Contrastive fine-tuning of the encoder pair on the training split, with
/// validation recall per epoch.
pub fn finetune_encoders(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    backbones: &mut BackboneBundle<f32>,
) -> Result<Stage1Report> {
    let train = load_encoder_split(vocab, manifest, Split::Train)?;
    let val = load_encoder_split(vocab, manifest, Split::Val)?;
    finetune_vision_encoder(backbones, &train, &val, &cfg.stage1)
}

/// Trains a bridge on the training split. With a model directory, the best
/// and last checkpoints go under `bridge/` and evaluations are appended to
/// `metrics.jsonl`; `resume` continues from `bridge/last`.
pub fn train_bridge_stage(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    backbones: &BackboneBundle<f32>,
    dir: Option<&ModelDir>,
    resume: bool,
) -> Result<(Bridge<f32>, TrainReport)> {
    cfg.validate()?;
    let train = encode_split(backbones, vocab, manifest, Split::Train)?;
    let val = encode_split(backbones, vocab, manifest, Split::Val)?;
    let (mut bridge, mut state) = match dir {
        Some(d) if resume => {
            let (bridge, state, _) = load_checkpoint::<f32>(&d.bridge_last())?;
            tracing::info!(step = state.step, "resuming bridge training");
            (bridge, state)
        }
        _ => {
            let bridge = Bridge::init(backbones, cfg.model.retrieval_dim, cfg.model.seed)?;
            let state = TrainState::new(&bridge, &cfg.train);
            (bridge, state)
        }
    };
    let bridge_dir = dir.map(|d| d.bridge());
    let target = bridge_dir.as_deref().map(|path| CheckpointTarget {
        dir: path,
        meta: json!({"train": cfg.train}),
    });
    let report = train_bridge(
        backbones,
        &mut bridge,
        &mut state,
        vocab,
        &train,
        &val,
        &cfg.train,
        target.as_ref(),
    )?;
    if let Some(d) = dir {
        for e in &report.evals {
            append_metrics(&d.metrics(), &json!({"stage": "bridge", "record": e}))?;
        }
    }
    Ok((bridge, report))
}

pub fn append_metrics(path: &Path, record: &Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{record}").map_err(|e| Error::io(path, e))
}

/// Saves the vocabulary and backbones of a model directory.
pub fn save_frozen_parts(dir: &ModelDir, vocab: &Vocabulary, backbones: &BackboneBundle<f32>) -> Result<()> {
    save_vocab(vocab, &dir.vocab())?;
    save_backbones(backbones, &dir.backbones())
}
