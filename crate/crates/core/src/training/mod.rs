//! Training: contrastive fine-tuning of the encoder pair, and bridge training
//! with the joint captioning and retrieval objective over interleaved
//! sequences, Adam with linear warmup, checkpoints and gradient checks.

mod stage1;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use stage1::{
    encoder_recall, finetune_vision_encoder, load_encoder_split, EncoderPair, EncoderSample, Stage1Config, Stage1Epoch,
    Stage1Report,
};

use crate::backbones::{BackboneBundle, Params};
use crate::bridge::Bridge;
use crate::captioning::{caption_embeddings, corpus_bleu, GenerationConfig};
use crate::checkpoint::{read_container, write_container};
use crate::data::{load_and_preprocess_image, DatasetManifest, Split, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::{combined_loss, cross_entropy_with_grads, info_nce_both_with_grads, LossBreakdown};
use crate::optim::{Adam, AdamConfig};
use crate::retrieval::{
    encode_images_chunked, evaluate_queries, project_captions, QuerySet, RecallTable, RetrievalIndex,
};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Image-caption pairs per step; two pairs share one interleaved sequence.
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            base_lr: 3e-4,
            warmup_steps: 100,
            lambda_c: 1.0,
            lambda_r: 1.0,
            max_steps: 1000,
            seed: 0,
            adam: AdamConfig::default(),
            eval_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.batch_size == 1 && self.lambda_r > 0.0 {
            return Err(Error::config(
                "train.batch_size",
                "contrastive terms need at least 2 pairs (set train.lambda_r = 0 for captioning-only runs)",
            ));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be finite and non-negative"));
        }
        if self.lambda_c < 0.0 || self.lambda_r < 0.0 {
            return Err(Error::config("train.lambda_c", "loss weights must be non-negative"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("train.eval_interval", "must be at least 1"));
        }
        Ok(())
    }
}

/// `base_lr * min(1, step / warmup_steps)`, constant after warmup.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.base_lr;
    }
    cfg.base_lr * (step as f64 / cfg.warmup_steps as f64).min(1.0)
}

/// One image with its cached vision embedding and tokenized captions.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage<T> {
    pub id: String,
    pub uri: String,
    pub v: Array1<T>,
    /// Each caption as `BOS .. EOS RET`.
    pub captions: Vec<TokenSequence>,
    pub texts: Vec<String>,
}

/// Loads a split and caches `v` per image; the vision encoder is frozen here.
pub fn encode_split(
    backbones: &BackboneBundle<f32>,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<EncodedImage<f32>>> {
    let records: Vec<_> = manifest.split(split).collect();
    let images = records
        .iter()
        .map(|r| load_and_preprocess_image(&manifest.image_path(r)))
        .collect::<Result<Vec<_>>>()?;
    let v = encode_images_chunked(backbones, &images);
    let context = backbones.decoder_cfg().context_len;
    records
        .iter()
        .zip(v.rows())
        .map(|(r, row)| {
            let captions: Vec<TokenSequence> = r.captions.iter().map(|c| vocab.tokenize(c, true)).collect();
            for c in &captions {
                c.validate(vocab.len(), context)?;
            }
            Ok(EncodedImage {
                id: r.id(),
                uri: r.image_uri.clone(),
                v: row.to_owned(),
                captions,
                texts: r.captions.clone(),
            })
        })
        .collect()
}

/// Two (image, caption) pairs back to back: `IMG c1.. RET IMG c2.. RET`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterleavedExample {
    /// Pair indices into the batch, in IMG order.
    pub pairs: Vec<usize>,
    pub ids: Vec<u32>,
    pub ret_positions: Vec<usize>,
    /// `loss_mask[t]` marks a supervised prediction of `ids[t + 1]`.
    pub loss_mask: Vec<bool>,
}

impl InterleavedExample {
    fn new(pairs: Vec<usize>, captions: &[TokenSequence], ret: u32) -> Self {
        let mut ids = Vec::new();
        for &p in &pairs {
            ids.push(Vocabulary::IMG);
            ids.extend_from_slice(&captions[p].ids);
        }
        let ret_positions = ids
            .iter()
            .enumerate()
            .filter(|(_, &i)| i == ret)
            .map(|(t, _)| t)
            .collect();
        let loss_mask = (0..ids.len())
            .map(|t| {
                ids.get(t + 1)
                    .is_some_and(|&next| !matches!(next, Vocabulary::IMG | Vocabulary::BOS | Vocabulary::PAD))
            })
            .collect();
        InterleavedExample {
            pairs,
            ids,
            ret_positions,
            loss_mask,
        }
    }

    fn targets(&self) -> Vec<u32> {
        (0..self.ids.len())
            .map(|t| self.ids.get(t + 1).copied().unwrap_or(Vocabulary::PAD))
            .collect()
    }
}

/// Interleaved sequences for the captioning loss plus the individual pairs
/// for the retrieval loss. Pair `i` uses `visual` row `i` and `captions[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedBatch<T> {
    pub examples: Vec<InterleavedExample>,
    pub visual: Array2<T>,
    pub captions: Vec<TokenSequence>,
    /// Source record index per pair.
    pub records: Vec<usize>,
}

impl<T: Scalar> InterleavedBatch<T> {
    /// Pairs in the given order; consecutive pairs share a sequence.
    pub fn from_pairs(visual: Array2<T>, captions: Vec<TokenSequence>, records: Vec<usize>, ret: u32) -> Result<Self> {
        if visual.nrows() != captions.len() || records.len() != captions.len() || captions.is_empty() {
            return Err(Error::Shape(format!(
                "{} visual rows, {} captions, {} records",
                visual.nrows(),
                captions.len(),
                records.len()
            )));
        }
        if let Some(bad) = captions.iter().position(|c| c.ids.last() != Some(&ret)) {
            return Err(Error::InvalidArgument(format!("caption {bad} does not end with RET")));
        }
        let examples = (0..captions.len())
            .collect::<Vec<_>>()
            .chunks(2)
            .map(|p| InterleavedExample::new(p.to_vec(), &captions, ret))
            .collect();
        Ok(InterleavedBatch {
            examples,
            visual,
            captions,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// Samples `min(batch_size, records)` images without replacement and one
/// caption per image uniformly.
pub fn build_interleaved_batch<T: Scalar>(
    records: &[EncodedImage<T>],
    batch_size: usize,
    ret: u32,
    rng: &mut ChaCha8Rng,
) -> Result<InterleavedBatch<T>> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "an interleaved batch needs at least 2 records, got {}",
            records.len()
        )));
    }
    let n = batch_size.min(records.len()).max(1);
    let picked = sample(rng, records.len(), n).into_vec();
    let m = records[0].v.len();
    let mut visual = Array2::<T>::zeros((n, m));
    let mut captions = Vec::with_capacity(n);
    for (i, &r) in picked.iter().enumerate() {
        let rec = &records[r];
        if rec.captions.is_empty() {
            return Err(Error::InvalidArgument(format!("image {} has no captions", rec.id)));
        }
        visual.row_mut(i).assign(&rec.v);
        let c = rng.random_range(0..rec.captions.len());
        captions.push(rec.captions[c].clone());
    }
    InterleavedBatch::from_pairs(visual, captions, picked, ret)
}

/// Loss of the full objective and, when asked, its gradient for every
/// trainable tensor. Backbone parameters are only read.
pub fn bridge_loss<T: Scalar>(
    backbones: &BackboneBundle<T>,
    bridge: &Bridge<T>,
    batch: &InterleavedBatch<T>,
    lambda_c: f64,
    lambda_r: f64,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Bridge<T>>)> {
    let dec = &backbones.decoder;
    let ret = bridge.ret();
    let ret_id = dec.ret_id();
    let d = dec.cfg.embed_dim;

    let prefixes = batch.visual.dot(&bridge.w_c);
    let seqs: Vec<&[u32]> = batch.examples.iter().map(|e| e.ids.as_slice()).collect();
    let pass = dec.run(&seqs, &prefixes, ret, with_grads)?;
    let logits = dec.logits(&pass.hidden, ret);
    let targets: Vec<u32> = batch.examples.iter().flat_map(|e| e.targets()).collect();
    let mask: Vec<bool> = batch
        .examples
        .iter()
        .flat_map(|e| e.loss_mask.iter().copied())
        .collect();
    let (l_c, d_logits) = cross_entropy_with_grads(&logits, &targets, &mask, T::lit(lambda_c), with_grads)?;

    let text_seqs: Vec<&[u32]> = batch.captions.iter().map(|c| c.ids.as_slice()).collect();
    let tpass = dec.run(&text_seqs, &Array2::zeros((0, d)), ret, with_grads)?;
    let ret_rows: Vec<usize> = tpass.segments.iter().map(|s| s.end - 1).collect();
    let h = Array2::from_shape_fn((ret_rows.len(), tpass.hidden.ncols()), |(i, j)| {
        tpass.hidden[[ret_rows[i], j]]
    });
    let u = h.dot(&bridge.w_t);
    let v = batch.visual.dot(&bridge.w_i);
    let c = info_nce_both_with_grads(&u, &v, bridge.log_tau[[0, 0]], T::lit(lambda_r))?;

    let breakdown = combined_loss(l_c.as_f64(), c.t2i.as_f64(), c.i2t.as_f64(), lambda_c, lambda_r)?;
    let Some(d_logits) = d_logits else {
        return Ok((breakdown, None));
    };

    let mut g = bridge.zeros_like();
    let mut d_ret = Array1::<T>::zeros(d);
    let d_hidden = dec.logits_backward(&pass.hidden, ret, &d_logits, &mut d_ret);
    let dx = dec.backward_inputs(&pass, &d_hidden);
    let img_rows: Vec<usize> = pass.image_rows().collect();
    let d_prefix = Array2::from_shape_fn((img_rows.len(), d), |(i, j)| dx[[img_rows[i], j]]);
    g.w_c = batch.visual.t().dot(&d_prefix);
    for r in pass.rows_with(ret_id) {
        d_ret += &dx.row(r);
    }

    g.w_t = h.t().dot(&c.d_text);
    g.w_i = batch.visual.t().dot(&c.d_image);
    let d_h = c.d_text.dot(&bridge.w_t.t());
    let mut d_hidden_t = Array2::<T>::zeros(tpass.hidden.raw_dim());
    for (i, &r) in ret_rows.iter().enumerate() {
        d_hidden_t.row_mut(r).assign(&d_h.row(i));
    }
    let dxt = dec.backward_inputs(&tpass, &d_hidden_t);
    for r in tpass.rows_with(ret_id) {
        d_ret += &dxt.row(r);
    }
    g.ret_embedding.row_mut(0).assign(&d_ret);
    g.log_tau[[0, 0]] = c.d_log_tau;
    Ok((breakdown, Some(g)))
}

/// Step counter, Adam moments, batch sampler and best-metric tracker.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
    pub best_metric: Option<f64>,
    pub best_step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    step: u64,
    adam_t: u64,
    adam: AdamConfig,
    rng_seed: String,
    rng_word_pos: String,
    best_metric: Option<f64>,
    best_step: Option<u64>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(bridge: &Bridge<T>, cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            adam: Adam::new(cfg.adam, bridge),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            best_metric: None,
            best_step: None,
        }
    }

    fn record(&self) -> StateRecord {
        StateRecord {
            step: self.step,
            adam_t: self.adam.t,
            adam: self.adam.cfg,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            best_metric: self.best_metric,
            best_step: self.best_step,
        }
    }
}

/// Checks the loss components and every gradient entry, naming the first
/// non-finite one.
fn check_finite<T: Scalar>(loss: &LossBreakdown, grads: &Bridge<T>) -> Result<()> {
    for (name, v) in [("L_c", loss.l_c), ("L_t2i", loss.l_t2i), ("L_i2t", loss.l_i2t)] {
        if !v.is_finite() {
            return Err(Error::Diverged(format!("{name} = {v}")));
        }
    }
    for (name, g) in grads.named() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged(format!("gradient of {name} is not finite")));
        }
    }
    Ok(())
}

/// One Adam update of the bridge at `lr_schedule(step + 1)`. Returns the loss
/// evaluated before the update.
pub fn train_step<T: Scalar>(
    backbones: &BackboneBundle<T>,
    bridge: &mut Bridge<T>,
    batch: &InterleavedBatch<T>,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (loss, grads) = bridge_loss(backbones, bridge, batch, cfg.lambda_c, cfg.lambda_r, true)?;
    let grads = grads.expect("gradients requested");
    check_finite(&loss, &grads)?;
    let lr = lr_schedule(state.step + 1, cfg);
    state.adam.step(bridge, &grads, lr);
    state.step += 1;
    Ok(loss)
}

pub fn save_checkpoint<T: Scalar>(bridge: &Bridge<T>, state: &TrainState<T>, meta: &Value, dir: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &Array2<T>)> = bridge.named();
    for (name, (m, v)) in &state.adam.moments {
        tensors.push((format!("adam.m.{name}"), m));
        tensors.push((format!("adam.v.{name}"), v));
    }
    write_container(dir, &tensors, &serde_json::to_value(state.record())?, meta)
}

/// Restores a bridge, its training state and the stored metadata. Nothing is
/// returned unless every tensor verifies.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Bridge<T>, TrainState<T>, Value)> {
    let mut c = read_container::<T>(dir)?;
    let bridge = Bridge {
        w_c: c.take("W_c", dir)?,
        w_i: c.take("W_i", dir)?,
        w_t: c.take("W_t", dir)?,
        ret_embedding: c.take("ret_embedding", dir)?,
        log_tau: c.take("log_tau", dir)?,
    };
    let dims = bridge.dims();
    if bridge.w_i.nrows() != dims.vision_dim
        || bridge.w_t.ncols() != dims.retrieval_dim
        || bridge.ret_embedding.dim() != (1, dims.embed_dim)
        || bridge.log_tau.dim() != (1, 1)
    {
        return Err(Error::checkpoint(dir, "bridge tensor shapes are inconsistent"));
    }
    let record: StateRecord =
        serde_json::from_value(c.train_state.clone()).map_err(|e| Error::checkpoint(dir, e.to_string()))?;
    let mut moments = BTreeMap::new();
    for (name, p) in bridge.named() {
        let m = c.take(&format!("adam.m.{name}"), dir)?;
        let v = c.take(&format!("adam.v.{name}"), dir)?;
        if m.dim() != p.dim() || v.dim() != p.dim() {
            return Err(Error::checkpoint(dir, format!("moment shapes for {name} do not match")));
        }
        moments.insert(name, (m, v));
    }
    let mut seed = [0u8; 32];
    hex::decode_to_slice(&record.rng_seed, &mut seed).map_err(|e| Error::checkpoint(dir, format!("rng seed: {e}")))?;
    let word_pos: u128 = record
        .rng_word_pos
        .parse()
        .map_err(|e| Error::checkpoint(dir, format!("rng position: {e}")))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    let state = TrainState {
        step: record.step,
        adam: Adam {
            cfg: record.adam,
            t: record.adam_t,
            moments,
        },
        rng,
        best_metric: record.best_metric,
        best_step: record.best_step,
    };
    Ok((bridge, state, c.meta))
}

/// Retrieval recall and, if `generation` is given, corpus BLEU-1 of greedy
/// captions, both over the given images.
pub fn evaluate_encoded(
    backbones: &BackboneBundle<f32>,
    bridge: &Bridge<f32>,
    vocab: &Vocabulary,
    items: &[EncodedImage<f32>],
    generation: Option<&GenerationConfig>,
) -> Result<(RecallTable, Option<f64>)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    let m = items[0].v.len();
    let v = Array2::from_shape_fn((items.len(), m), |(i, j)| items[i].v[j]);
    let index = RetrievalIndex::from_embeddings(
        items.iter().map(|i| i.id.clone()).collect(),
        items.iter().map(|i| i.uri.clone()).collect(),
        v.dot(&bridge.w_i),
    )?;
    let queries = QuerySet::from_captions(items.iter().map(|i| (i.id.as_str(), i.texts.as_slice())));
    let seqs: Vec<TokenSequence> = items.iter().flat_map(|i| i.captions.iter().cloned()).collect();
    let rows = project_captions(backbones, bridge, &seqs)?;
    let recall = evaluate_queries(&index, &queries, &rows)?;
    let bleu1 = match generation {
        Some(g) => {
            let hyps: Vec<String> = caption_embeddings(backbones, bridge, vocab, &v, g)?
                .into_iter()
                .map(|c| c.text)
                .collect();
            let refs: Vec<Vec<String>> = items.iter().map(|i| i.texts.clone()).collect();
            Some(corpus_bleu(&hyps, &refs, 1)?)
        }
        None => None,
    };
    Ok((recall, bleu1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_recall: Option<RecallTable>,
    pub val_bleu1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<LossBreakdown>,
    pub evals: Vec<EvalRecord>,
}

/// Where `train_bridge` writes `best/` (by validation mean recall) and `last/`.
pub struct CheckpointTarget<'a> {
    pub dir: &'a Path,
    pub meta: Value,
}

pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

/// Runs `train_step` until `cfg.max_steps`, resuming from `state.step`.
/// Evaluates on `val` every `eval_interval` steps and after the final step.
#[allow(clippy::too_many_arguments)]
pub fn train_bridge(
    backbones: &BackboneBundle<f32>,
    bridge: &mut Bridge<f32>,
    state: &mut TrainState<f32>,
    vocab: &Vocabulary,
    train: &[EncodedImage<f32>],
    val: &[EncodedImage<f32>],
    cfg: &TrainConfig,
    target: Option<&CheckpointTarget>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    let generation = GenerationConfig::default();
    let ret = backbones.decoder.ret_id();
    while state.step < cfg.max_steps {
        let batch = build_interleaved_batch(train, cfg.batch_size, ret, &mut state.rng)?;
        let lr = lr_schedule(state.step + 1, cfg);
        let loss = train_step(backbones, bridge, &batch, state, cfg)?;
        report.losses.push(loss);
        if !state.step.is_multiple_of(cfg.eval_interval) && state.step != cfg.max_steps {
            continue;
        }
        let (val_recall, val_bleu1) = if val.is_empty() {
            (None, None)
        } else {
            let (r, b) = evaluate_encoded(backbones, bridge, vocab, val, Some(&generation))?;
            (Some(r), b)
        };
        tracing::info!(
            step = state.step,
            l_total = loss.l_total,
            l_c = loss.l_c,
            val_r1 = val_recall.map(|r| r.r1),
            val_mean_recall = val_recall.map(|r| r.mean),
            val_bleu1,
            "eval"
        );
        if let Some(r) = val_recall {
            if state.best_metric.is_none_or(|b| r.mean > b) {
                state.best_metric = Some(r.mean);
                state.best_step = Some(state.step);
                if let Some(t) = target {
                    save_checkpoint(bridge, state, &t.meta, &t.dir.join(BEST_DIR))?;
                }
            }
        }
        report.evals.push(EvalRecord {
            step: state.step,
            lr,
            loss,
            val_recall,
            val_bleu1,
        });
    }
    if let Some(t) = target {
        save_checkpoint(bridge, state, &t.meta, &t.dir.join(LAST_DIR))?;
        if state.best_metric.is_none() {
            save_checkpoint(bridge, state, &t.meta, &t.dir.join(BEST_DIR))?;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over every checked scalar.
    pub max_rel_error: f64,
    pub per_tensor: BTreeMap<String, f64>,
    pub analytic: BTreeMap<String, Array2<f64>>,
    pub numeric: BTreeMap<String, Array2<f64>>,
}

/// Scale below which differences are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of `L_total` with central differences, in
/// `f64`. `only` restricts the check to the named tensors. The relative error
/// of an entry is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check(
    backbones: &BackboneBundle<f64>,
    bridge: &Bridge<f64>,
    batch: &InterleavedBatch<f64>,
    lambda_c: f64,
    lambda_r: f64,
    eps: f64,
    only: Option<&[&str]>,
) -> Result<GradCheckReport> {
    let (_, grads) = bridge_loss(backbones, bridge, batch, lambda_c, lambda_r, true)?;
    let grads = grads.expect("gradients requested");
    let analytic: BTreeMap<String, Array2<f64>> = grads.named().into_iter().map(|(n, a)| (n, a.clone())).collect();
    let names: Vec<String> = analytic
        .keys()
        .filter(|n| only.is_none_or(|o| o.contains(&n.as_str())))
        .cloned()
        .collect();
    let eval =
        |b: &Bridge<f64>| -> Result<f64> { Ok(bridge_loss(backbones, b, batch, lambda_c, lambda_r, false)?.0.l_total) };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_tensor: BTreeMap::new(),
        analytic: BTreeMap::new(),
        numeric: BTreeMap::new(),
    };
    for name in names {
        let shape = analytic[&name].raw_dim();
        let mut numeric = Array2::<f64>::zeros(shape);
        for idx in 0..numeric.len() {
            let (r, c) = (idx / numeric.ncols(), idx % numeric.ncols());
            let perturbed = |delta: f64| {
                let mut b = bridge.clone();
                b.visit_mut("", &mut |n, a| {
                    if n == name {
                        a[[r, c]] += delta;
                    }
                });
                eval(&b)
            };
            numeric[[r, c]] = (perturbed(eps)? - perturbed(-eps)?) / (2.0 * eps);
        }
        let a = &analytic[&name];
        let worst = a
            .iter()
            .zip(numeric.iter())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(GRAD_CHECK_FLOOR))
            .fold(0.0, f64::max);
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_tensor.insert(name.clone(), worst);
        report.analytic.insert(name.clone(), a.clone());
        report.numeric.insert(name, numeric);
    }
    Ok(report)
}
