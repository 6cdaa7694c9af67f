//! Language-model pretraining of the toy decoder.
//!
//! The decoder stands in for a pretrained language model, so before it is
//! frozen it is trained with plain next-token prediction on caption text.
//! Each sequence packs several scenes, each opened by the IMG token and
//! holding two or more paraphrases of that scene back to back. The model
//! learns to reuse content from earlier in the current scene and to drop
//! everything before the latest IMG, the layout of interleaved prompts.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Decoder, Params};
use crate::data::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmPretrainConfig {
    pub steps: usize,
    pub batch_sequences: usize,
    pub max_captions_per_sequence: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability that a sequence packs paraphrases of one scene rather than
    /// captions of independently drawn scenes.
    pub same_scene_fraction: f64,
    /// Scenes per packed sequence, each opened by the IMG token.
    pub scenes_per_sequence: usize,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig {
            steps: 300,
            batch_sequences: 16,
            max_captions_per_sequence: 3,
            lr: 3e-3,
            seed: 11,
            same_scene_fraction: 1.0,
            scenes_per_sequence: 2,
        }
    }
}

/// Mean next-token cross-entropy over base-vocabulary logits, with gradients.
fn lm_loss_and_grads<T: Scalar>(
    decoder: &Decoder<T>,
    seqs: &[Vec<u32>],
    grads: Option<&mut Decoder<T>>,
) -> Result<f64> {
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let dummy_ret = decoder.mean_embedding();
    // IMG rows carry the IMG token row, which is trained like any other token.
    let n_img = seqs.iter().flatten().filter(|&&id| id == Vocabulary::IMG).count();
    let img = decoder.tok_emb.row(Vocabulary::IMG as usize);
    let visual = Array2::from_shape_fn((n_img, decoder.cfg.embed_dim), |(_, j)| img[j]);
    let pass = decoder.run(&refs, &visual, dummy_ret.view(), grads.is_some())?;
    let logits = pass.hidden.dot(&decoder.tok_emb.t());
    let mut d_logits = Array2::<T>::zeros(logits.raw_dim());
    let mut total = 0.0;
    let mut count = 0usize;
    for seg in &pass.segments {
        for row in seg.start..seg.end - 1 {
            let target = pass.ids[row + 1] as usize;
            let l = logits.row(row);
            let max = l.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = l.iter().map(|&v| (v - max).exp()).sum();
            total += (sum.ln() + max - l[target]).as_f64();
            let mut d = d_logits.row_mut(row);
            for (j, dv) in d.iter_mut().enumerate() {
                *dv = (l[j] - max).exp() / sum;
            }
            d[target] -= T::one();
            count += 1;
        }
    }
    let loss = total / count as f64;
    if let Some(g) = grads {
        d_logits.mapv_inplace(|v| v / T::lit(count as f64));
        // tied head: logits = hidden . tok_emb^T
        g.tok_emb += &d_logits.t().dot(&pass.hidden);
        let d_hidden = d_logits.dot(&decoder.tok_emb);
        decoder.backward_params(&pass, &d_hidden, g);
    }
    Ok(loss)
}

/// Trains every decoder parameter on groups of paraphrases (one group per
/// scene); returns the loss curve.
pub fn pretrain_language_model<T: Scalar>(
    decoder: &mut Decoder<T>,
    groups: &[Vec<TokenSequence>],
    cfg: &LmPretrainConfig,
) -> Result<Vec<f64>> {
    let ret = decoder.ret_id();
    let pool: Vec<Vec<&[u32]>> = groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|c| match c.ids.last() {
                    Some(&last) if last == ret => &c.ids[..c.ids.len() - 1],
                    _ => &c.ids[..],
                })
                .filter(|c| c.len() >= 2 && c.len() <= decoder.cfg.context_len && !c.contains(&Vocabulary::IMG))
                .collect::<Vec<_>>()
        })
        .filter(|g| !g.is_empty())
        .collect();
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no captions to pretrain on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::default(), decoder);
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let seqs: Vec<Vec<u32>> = (0..cfg.batch_sequences)
            .map(|_| {
                let mut blocks: Vec<Vec<u32>> = (0..cfg.scenes_per_sequence.max(1))
                    .map(|_| {
                        let n = rng.random_range(1..=cfg.max_captions_per_sequence.max(1)) + 1;
                        let picked: Vec<&[u32]> = if rng.random_bool(cfg.same_scene_fraction.clamp(0.0, 1.0)) {
                            let group = pool.choose(&mut rng).expect("non-empty pool");
                            group.choose_multiple(&mut rng, n.min(group.len())).copied().collect()
                        } else {
                            (0..n)
                                .map(|_| {
                                    *pool
                                        .choose(&mut rng)
                                        .expect("non-empty pool")
                                        .choose(&mut rng)
                                        .expect("non-empty group")
                                })
                                .collect()
                        };
                        std::iter::once(Vocabulary::IMG).chain(picked.concat()).collect()
                    })
                    .collect();
                // A window into the packed stream that starts inside the first
                // block, so any position can hold content words.
                let first = blocks[0].len();
                let start = rng.random_range(0..first - 2);
                blocks[0].drain(..start);
                let stream = blocks.concat();
                let end = stream.len().min(decoder.cfg.context_len);
                stream[..end].to_vec()
            })
            .collect();
        let mut grads = decoder.zeros_like();
        let loss = lm_loss_and_grads(decoder, &seqs, Some(&mut grads))?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("language-model pretraining loss {loss}")));
        }
        adam.step(decoder, &grads, cfg.lr);
        curve.push(loss);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{init_backbones, DecoderConfig, VisionEncoderConfig};

    fn tiny_decoder() -> Decoder<f64> {
        let cfg = DecoderConfig {
            vocab_size: 10,
            embed_dim: 8,
            hidden_dim: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 12,
        };
        init_backbones::<f64>(VisionEncoderConfig::default(), cfg, 1)
            .unwrap()
            .decoder
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dec = tiny_decoder();
        let seqs = vec![vec![4, 1, 5, 6, 2], vec![1, 7, 2, 4, 1, 8, 2]];
        let mut g = dec.zeros_like();
        lm_loss_and_grads(&dec, &seqs, Some(&mut g)).unwrap();
        let eps = 1e-6;
        for name in [
            "tok_emb",
            "pos",
            "blocks.0.attn.q.weight",
            "blocks.0.mlp.fc2.bias",
            "ln_f.gamma",
        ] {
            let analytic = g.named().into_iter().find(|(n, _)| n == name).unwrap().1.clone();
            for flat in [0, analytic.len() / 3, analytic.len() - 1] {
                let idx = (flat / analytic.ncols(), flat % analytic.ncols());
                let eval = |delta: f64| {
                    let mut d = dec.clone();
                    d.visit_mut("", &mut |n, a| {
                        if n == name {
                            a[idx] += delta;
                        }
                    });
                    lm_loss_and_grads(&d, &seqs, None).unwrap()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let err = (fd - analytic[idx]).abs() / fd.abs().max(1e-4);
                assert!(err < 1e-4, "{name}{idx:?}: fd {fd} vs {}", analytic[idx]);
            }
        }
    }

    #[test]
    fn pretraining_reduces_loss() {
        let mut dec = tiny_decoder();
        let caps = vec![
            vec![
                TokenSequence::new(vec![1, 5, 6, 2]),
                TokenSequence::new(vec![1, 6, 5, 2]),
            ],
            vec![TokenSequence::new(vec![1, 7, 8, 2])],
        ];
        let cfg = LmPretrainConfig {
            steps: 60,
            batch_sequences: 4,
            lr: 1e-2,
            ..Default::default()
        };
        let curve = pretrain_language_model(&mut dec, &caps, &cfg).unwrap();
        let head: f64 = curve[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = curve[curve.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head * 0.7, "{head} -> {tail}");
    }
}
