//! Caption generation from a single visual prefix, and corpus evaluation.

mod metrics;

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use metrics::{bleu, cider_d, corpus_bleu, rouge_l};

use crate::backbones::{BackboneBundle, Decoder};
use crate::bridge::Bridge;
use crate::data::{load_and_preprocess_image, DatasetManifest, ImageTensor, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::retrieval::encode_images_chunked;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub max_new_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            mode: DecodeMode::Greedy,
            beam_width: 1,
            max_new_tokens: 24,
        }
    }
}

impl GenerationConfig {
    pub fn beam(width: usize, max_new_tokens: usize) -> Self {
        GenerationConfig {
            mode: DecodeMode::Beam,
            beam_width: width,
            max_new_tokens,
        }
    }

    /// `context_len` must hold the prefix, BOS and every generated token.
    pub fn validate(&self, context_len: usize) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("generation.beam_width", "must be at least 1"));
        }
        if self.mode == DecodeMode::Greedy && self.beam_width != 1 {
            return Err(Error::config("generation.beam_width", "must be 1 for greedy decoding"));
        }
        if self.max_new_tokens == 0 || self.max_new_tokens + 2 > context_len {
            return Err(Error::config(
                "generation.max_new_tokens",
                format!(
                    "must be in 1..={} for context length {context_len}",
                    context_len.saturating_sub(2)
                ),
            ));
        }
        Ok(())
    }
}

/// Anything that scores the next token given the tokens so far.
pub trait NextTokenModel {
    fn next_logits(&self, tokens: &[u32]) -> Result<Vec<f32>>;
}

/// The frozen decoder conditioned on one projected image embedding.
pub struct PrefixedDecoder<'a> {
    decoder: &'a Decoder<f32>,
    prefix: Array2<f32>,
    ret: Array1<f32>,
}

impl<'a> PrefixedDecoder<'a> {
    pub fn new(decoder: &'a Decoder<f32>, bridge: &Bridge<f32>, v: &Array1<f32>) -> Result<Self> {
        let prefix = bridge.project_visual_prefix(v.view())?.insert_axis(ndarray::Axis(0));
        Ok(PrefixedDecoder {
            decoder,
            prefix,
            ret: bridge.ret().to_owned(),
        })
    }
}

impl NextTokenModel for PrefixedDecoder<'_> {
    fn next_logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(Vocabulary::IMG);
        ids.extend_from_slice(tokens);
        let pass = self.decoder.run(&[&ids], &self.prefix, self.ret.view(), false)?;
        let last = pass.hidden.slice(ndarray::s![pass.hidden.nrows() - 1.., ..]).to_owned();
        Ok(self.decoder.logits(&last, self.ret.view()).row(0).to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated {
    pub text: String,
    /// Generated ids, excluding BOS and the stop token.
    pub ids: Vec<u32>,
    /// True when the budget ran out before a stop token.
    pub truncated: bool,
}

/// Tokens that may never be generated.
fn banned(id: u32) -> bool {
    matches!(id, Vocabulary::PAD | Vocabulary::BOS | Vocabulary::IMG)
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let allowed = |j: usize| !banned(j as u32);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, &l)| l as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .enumerate()
            .filter(|(j, _)| allowed(*j))
            .map(|(_, &l)| (l as f64 - max).exp())
            .sum::<f64>()
            .ln();
    logits
        .iter()
        .enumerate()
        .map(|(j, &l)| if allowed(j) { l as f64 - lse } else { f64::NEG_INFINITY })
        .collect()
}

fn finish(vocab: &Vocabulary, ids: Vec<u32>, truncated: bool) -> Generated {
    Generated {
        text: vocab.detokenize(&ids),
        ids,
        truncated,
    }
}

fn greedy<M: NextTokenModel + ?Sized>(model: &M, vocab: &Vocabulary, cfg: &GenerationConfig) -> Result<Generated> {
    let mut tokens = vec![Vocabulary::BOS];
    for _ in 0..cfg.max_new_tokens {
        let logits = model.next_logits(&tokens)?;
        let mut best: Option<(usize, f32)> = None;
        for (j, &l) in logits.iter().enumerate() {
            if !banned(j as u32) && best.is_none_or(|(_, b)| l > b) {
                best = Some((j, l));
            }
        }
        let next = best
            .ok_or_else(|| Error::InvalidArgument("model produced no logits".into()))?
            .0 as u32;
        if next == Vocabulary::EOS || next == vocab.ret() {
            return Ok(finish(vocab, tokens.split_off(1), false));
        }
        tokens.push(next);
    }
    Ok(finish(vocab, tokens.split_off(1), true))
}

fn beam<M: NextTokenModel + ?Sized>(model: &M, vocab: &Vocabulary, cfg: &GenerationConfig) -> Result<Generated> {
    let width = cfg.beam_width;
    let mut beams: Vec<(Vec<u32>, f64)> = vec![(vec![Vocabulary::BOS], 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (b, (tokens, score)) in beams.iter().enumerate() {
            let lp = log_softmax(&model.next_logits(tokens)?);
            candidates.extend(
                lp.iter()
                    .enumerate()
                    .filter(|(j, _)| !banned(*j as u32))
                    .map(|(j, &l)| (score + l, b, j as u32)),
            );
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for (score, b, tok) in candidates.into_iter().take(width) {
            let mut tokens = beams[b].0.clone();
            if tok == Vocabulary::EOS || tok == vocab.ret() {
                finished.push((tokens.split_off(1), score));
            } else {
                tokens.push(tok);
                next.push((tokens, score));
            }
        }
        beams = next;
        let best_finished = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        // log-probabilities only decrease, so no live beam can overtake
        if beams.is_empty() || beams.iter().all(|b| b.1 <= best_finished) {
            break;
        }
    }
    let pick = |items: &[(Vec<u32>, f64)]| {
        items
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
    };
    if let Some(i) = pick(&finished) {
        return Ok(finish(vocab, finished.swap_remove(i).0, false));
    }
    let i = pick(&beams).expect("at least one live beam");
    Ok(finish(vocab, beams.swap_remove(i).0.split_off(1), true))
}

/// Autoregressive decoding from BOS until EOS or RET (both stripped) or the budget.
pub fn generate<M: NextTokenModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    cfg: &GenerationConfig,
) -> Result<Generated> {
    match cfg.mode {
        DecodeMode::Greedy => greedy(model, vocab, cfg),
        DecodeMode::Beam => beam(model, vocab, cfg),
    }
}

pub fn generate_caption(
    backbones: &BackboneBundle<f32>,
    bridge: &Bridge<f32>,
    vocab: &Vocabulary,
    image: &ImageTensor,
    cfg: &GenerationConfig,
) -> Result<Generated> {
    cfg.validate(backbones.decoder_cfg().context_len)?;
    let v = backbones.encode_image(image);
    generate(&PrefixedDecoder::new(&backbones.decoder, bridge, &v)?, vocab, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub image: String,
    pub hypothesis: String,
    pub references: Vec<String>,
    pub truncated: bool,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

/// Corpus BLEU, mean ROUGE-L and CIDEr-D, plus per-image rows.
pub fn score_corpus(
    images: &[String],
    hypotheses: &[Generated],
    references: &[Vec<String>],
) -> Result<(CorpusScore, Vec<ImageEvaluation>)> {
    let hyps: Vec<String> = hypotheses.iter().map(|g| g.text.clone()).collect();
    let (cider, per_image_cider) = cider_d(&hyps, references)?;
    let mut rows = Vec::with_capacity(hyps.len());
    let mut rouge_sum = 0.0;
    for (i, (h, refs)) in hyps.iter().zip(references).enumerate() {
        let r = rouge_l(h, refs)?;
        rouge_sum += r;
        rows.push(ImageEvaluation {
            image: images[i].clone(),
            hypothesis: h.clone(),
            references: refs.clone(),
            truncated: hypotheses[i].truncated,
            bleu1: bleu(h, refs, 1)?,
            bleu2: bleu(h, refs, 2)?,
            bleu3: bleu(h, refs, 3)?,
            bleu4: bleu(h, refs, 4)?,
            rouge_l: r,
            cider_d: per_image_cider[i],
        });
    }
    let score = CorpusScore {
        bleu1: corpus_bleu(&hyps, references, 1)?,
        bleu2: corpus_bleu(&hyps, references, 2)?,
        bleu3: corpus_bleu(&hyps, references, 3)?,
        bleu4: corpus_bleu(&hyps, references, 4)?,
        rouge_l: rouge_sum / hyps.len() as f64,
        cider_d: cider,
    };
    Ok((score, rows))
}

/// Greedy captions for a list of image embeddings.
pub fn caption_embeddings(
    backbones: &BackboneBundle<f32>,
    bridge: &Bridge<f32>,
    vocab: &Vocabulary,
    v: &Array2<f32>,
    cfg: &GenerationConfig,
) -> Result<Vec<Generated>> {
    cfg.validate(backbones.decoder_cfg().context_len)?;
    v.rows()
        .into_iter()
        .map(|row| {
            generate(
                &PrefixedDecoder::new(&backbones.decoder, bridge, &row.to_owned())?,
                vocab,
                cfg,
            )
        })
        .collect()
}

/// Captions every image of a split and scores against all its references.
/// When `log` is given, writes one JSON line per image and a summary line.
pub fn evaluate_corpus(
    backbones: &BackboneBundle<f32>,
    bridge: &Bridge<f32>,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
    split: Split,
    cfg: &GenerationConfig,
    log: Option<&Path>,
) -> Result<(CorpusScore, Vec<ImageEvaluation>)> {
    let records: Vec<_> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("the {split} split is empty")));
    }
    let images = records
        .iter()
        .map(|r| load_and_preprocess_image(&manifest.image_path(r)))
        .collect::<Result<Vec<_>>>()?;
    let v = encode_images_chunked(backbones, &images);
    let generated = caption_embeddings(backbones, bridge, vocab, &v, cfg)?;
    let ids: Vec<String> = records.iter().map(|r| r.id()).collect();
    let refs: Vec<Vec<String>> = records.iter().map(|r| r.captions.clone()).collect();
    let (score, rows) = score_corpus(&ids, &generated, &refs)?;
    if let Some(path) = log {
        write_log(path, &score, &rows)?;
    }
    Ok((score, rows))
}

fn write_log(path: &Path, score: &CorpusScore, rows: &[ImageEvaluation]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    serde_json::to_writer(&mut out, &serde_json::json!({ "summary": score }))?;
    out.push(b'\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
