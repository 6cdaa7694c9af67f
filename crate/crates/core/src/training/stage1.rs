//! Contrastive fine-tuning of the vision encoder against the text encoder,
//! run before the bridge is trained. Its temperature is separate from the
//! bridge temperature.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::nn::{join, Params};
use crate::backbones::{BackboneBundle, TextEncoder, VisionEncoder};
use crate::data::{load_and_preprocess_image, DatasetManifest, ImageTensor, Split, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::info_nce_both_with_grads;
use crate::optim::{Adam, AdamConfig};
use crate::retrieval::{evaluate_queries, image_to_text_recall, QuerySet, RecallTable, RetrievalIndex};

const INITIAL_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            batch_size: 32,
            lr: 1e-3,
            steps: 300,
            seed: 5,
            adam: AdamConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(
                "stage1.batch_size",
                "contrastive training needs at least 2 images per step",
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("stage1.lr", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Trainable state of the encoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair<T> {
    pub vision: VisionEncoder<T>,
    pub text: TextEncoder<T>,
    pub log_tau: Array2<T>,
}

impl<T: crate::tensor::Scalar> Params<T> for EncoderPair<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.vision.visit(&join(prefix, "vision"), f);
        self.text.visit(&join(prefix, "text"), f);
        f(join(prefix, "log_tau"), &self.log_tau);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.vision.visit_mut(&join(prefix, "vision"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
        f(join(prefix, "log_tau"), &mut self.log_tau);
    }
}

/// One image with its captions tokenized for the text encoder (no RET).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSample {
    pub id: String,
    pub image: ImageTensor,
    pub captions: Vec<TokenSequence>,
    pub texts: Vec<String>,
}

pub fn load_encoder_split(vocab: &Vocabulary, manifest: &DatasetManifest, split: Split) -> Result<Vec<EncoderSample>> {
    manifest
        .split(split)
        .map(|r| {
            Ok(EncoderSample {
                id: r.id(),
                image: load_and_preprocess_image(&manifest.image_path(r))?,
                captions: r.captions.iter().map(|c| vocab.tokenize(c, false)).collect(),
                texts: r.captions.clone(),
            })
        })
        .collect()
}

/// Text-to-image and image-to-text recall of the encoder pair itself.
pub fn encoder_recall(
    backbones: &BackboneBundle<f32>,
    samples: &[EncoderSample],
) -> Result<(RecallTable, RecallTable)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
    let v = backbones.vision.encode(&images);
    let seqs: Vec<&[u32]> = samples
        .iter()
        .flat_map(|s| s.captions.iter().map(|c| c.ids.as_slice()))
        .collect();
    let u = backbones.text.encode(&seqs)?;
    let owner: Vec<usize> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| std::iter::repeat_n(i, s.captions.len()))
        .collect();
    let index = RetrievalIndex::from_embeddings(
        samples.iter().map(|s| s.id.clone()).collect(),
        samples.iter().map(|s| s.id.clone()).collect(),
        v.clone(),
    )?;
    let queries = QuerySet::from_captions(samples.iter().map(|s| (s.id.as_str(), s.texts.as_slice())));
    let t2i = evaluate_queries(&index, &queries, &u)?;
    let i2t = image_to_text_recall(&v, &u, &owner)?;
    Ok((t2i, i2t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub val_t2i: Option<RecallTable>,
    pub val_i2t: Option<RecallTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub baseline_t2i: Option<RecallTable>,
    pub baseline_i2t: Option<RecallTable>,
    pub epochs: Vec<Stage1Epoch>,
    pub final_tau: f64,
}

/// Trains the vision and text encoders with the symmetric contrastive loss
/// for `cfg.steps` Adam steps. Each step draws `min(batch_size, n)` images
/// without replacement and one caption per image. Validation recall is
/// logged at the end of every epoch of `ceil(n / batch_size)` steps.
pub fn finetune_vision_encoder(
    backbones: &mut BackboneBundle<f32>,
    train: &[EncoderSample],
    val: &[EncoderSample],
    cfg: &Stage1Config,
) -> Result<Stage1Report> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "encoder training needs at least 2 images, got {}",
            train.len()
        )));
    }
    let eval = |b: &BackboneBundle<f32>| -> Result<(Option<RecallTable>, Option<RecallTable>)> {
        if val.is_empty() {
            return Ok((None, None));
        }
        let (t, i) = encoder_recall(b, val)?;
        Ok((Some(t), Some(i)))
    };
    let (baseline_t2i, baseline_i2t) = eval(backbones)?;
    let mut pair = EncoderPair {
        vision: backbones.vision.clone(),
        text: backbones.text.clone(),
        log_tau: Array2::from_elem((1, 1), INITIAL_TAU.ln() as f32),
    };
    let mut adam = Adam::new(cfg.adam, &pair);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.batch_size.min(train.len());
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let mut epochs = Vec::new();
    let mut epoch_loss = 0.0;
    let mut epoch_steps = 0u64;
    for step in 1..=cfg.steps {
        let picked = sample(&mut rng, train.len(), n).into_vec();
        let images: Vec<&ImageTensor> = picked.iter().map(|&i| &train[i].image).collect();
        let captions: Vec<&[u32]> = picked
            .iter()
            .map(|&i| {
                let c = &train[i].captions;
                c[rng.random_range(0..c.len())].ids.as_slice()
            })
            .collect();
        let (v, vcache) = pair.vision.forward_train(&images);
        let (u, tcache) = pair.text.forward_train(&captions)?;
        let c = info_nce_both_with_grads(&u, &v, pair.log_tau[[0, 0]], 1.0)?;
        let loss = f64::from(c.t2i + c.i2t);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "encoder contrastive loss = {loss} at step {step}"
            )));
        }
        let mut grads = pair.zeros_like();
        pair.text.backward(&tcache, &c.d_text, &mut grads.text);
        pair.vision.backward(&vcache, &c.d_image, &mut grads.vision);
        grads.log_tau[[0, 0]] = c.d_log_tau;
        adam.step(&mut pair, &grads, cfg.lr);
        epoch_loss += loss;
        epoch_steps += 1;
        if step % steps_per_epoch == 0 || step == cfg.steps {
            backbones.vision = pair.vision.clone();
            backbones.text = pair.text.clone();
            let (val_t2i, val_i2t) = eval(backbones)?;
            let record = Stage1Epoch {
                epoch: epochs.len() + 1,
                step,
                mean_loss: epoch_loss / epoch_steps as f64,
                val_t2i,
                val_i2t,
            };
            tracing::info!(
                epoch = record.epoch,
                step,
                loss = record.mean_loss,
                val_t2i_r1 = val_t2i.map(|r| r.r1),
                val_i2t_r1 = val_i2t.map(|r| r.r1),
                "encoder epoch"
            );
            epochs.push(record);
            epoch_loss = 0.0;
            epoch_steps = 0;
        }
    }
    backbones.vision = pair.vision;
    backbones.text = pair.text;
    Ok(Stage1Report {
        baseline_t2i,
        baseline_i2t,
        epochs,
        final_tau: f64::from(pair.log_tau[[0, 0]]).exp(),
    })
}
