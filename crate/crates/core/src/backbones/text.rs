use std::ops::Range;

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use super::nn::{join, uniform, Params, Stack, StackCache};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Concatenates sequences into one id list plus segment ranges, checking the context limit.
pub(crate) fn pack(seqs: &[&[u32]], context_len: usize) -> Result<(Vec<u32>, Vec<Range<usize>>)> {
    let mut ids = Vec::with_capacity(seqs.iter().map(|s| s.len()).sum());
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.len() > context_len {
            return Err(Error::ContextOverflow {
                len: s.len(),
                context: context_len,
            });
        }
        if s.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        segments.push(ids.len()..ids.len() + s.len());
        ids.extend_from_slice(s);
    }
    Ok((ids, segments))
}

/// Causal text encoder used only for contrastive encoder fine-tuning.
/// The sentence embedding is the final hidden state at the EOS position.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder<T> {
    pub context_len: usize,
    pub tok_emb: Array2<T>,
    pub pos: Array2<T>,
    pub stack: Stack<T>,
}

pub struct TextCache<T> {
    ids: Vec<u32>,
    segments: Vec<Range<usize>>,
    pooled_rows: Vec<usize>,
    stack: StackCache<T>,
}

impl<T: Scalar> TextEncoder<T> {
    pub fn init<R: Rng>(
        rng: &mut R,
        vocab_size: usize,
        dim: usize,
        n_layers: usize,
        n_heads: usize,
        context_len: usize,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        TextEncoder {
            context_len,
            tok_emb: uniform(rng, vocab_size, dim, bound),
            pos: uniform(rng, context_len, dim, bound),
            stack: Stack::init(rng, dim, n_layers, n_heads, true),
        }
    }

    pub fn dim(&self) -> usize {
        self.tok_emb.ncols()
    }

    fn embed(&self, ids: &[u32], segments: &[Range<usize>]) -> Result<Array2<T>> {
        let mut x = Array2::<T>::zeros((ids.len(), self.dim()));
        for seg in segments {
            for (p, row) in seg.clone().enumerate() {
                let id = ids[row] as usize;
                if id >= self.tok_emb.nrows() {
                    return Err(Error::InvalidArgument(format!("token id {id} outside vocabulary")));
                }
                let mut r = x.row_mut(row);
                r += &self.tok_emb.row(id);
                r += &self.pos.row(p);
            }
        }
        Ok(x)
    }

    fn pooled_rows(ids: &[u32], segments: &[Range<usize>]) -> Vec<usize> {
        segments
            .iter()
            .map(|seg| {
                seg.clone()
                    .rev()
                    .find(|&r| ids[r] == Vocabulary::EOS)
                    .unwrap_or(seg.end - 1)
            })
            .collect()
    }

    pub fn encode(&self, seqs: &[&[u32]]) -> Result<Array2<T>> {
        let (ids, segments) = pack(seqs, self.context_len)?;
        let hidden = self.stack.infer(self.embed(&ids, &segments)?, &segments);
        let rows = Self::pooled_rows(&ids, &segments);
        Ok(Array2::from_shape_fn((rows.len(), self.dim()), |(i, j)| {
            hidden[[rows[i], j]]
        }))
    }

    pub fn forward_train(&self, seqs: &[&[u32]]) -> Result<(Array2<T>, TextCache<T>)> {
        let (ids, segments) = pack(seqs, self.context_len)?;
        let (hidden, stack) = self.stack.forward(self.embed(&ids, &segments)?, &segments);
        let pooled_rows = Self::pooled_rows(&ids, &segments);
        let out = Array2::from_shape_fn((pooled_rows.len(), self.dim()), |(i, j)| hidden[[pooled_rows[i], j]]);
        Ok((
            out,
            TextCache {
                ids,
                segments,
                pooled_rows,
                stack,
            },
        ))
    }

    pub fn backward(&self, cache: &TextCache<T>, d_out: &Array2<T>, grads: &mut Self) {
        let mut dh = Array2::<T>::zeros((cache.ids.len(), self.dim()));
        for (i, &r) in cache.pooled_rows.iter().enumerate() {
            dh.row_mut(r).assign(&d_out.row(i));
        }
        let dx = self
            .stack
            .backward(&cache.stack, &cache.segments, &dh, Some(&mut grads.stack));
        for seg in &cache.segments {
            for (p, row) in seg.clone().enumerate() {
                let d: ArrayView1<T> = dx.row(row);
                let mut t = grads.tok_emb.row_mut(cache.ids[row] as usize);
                t += &d;
                let mut q = grads.pos.row_mut(p);
                q += &d;
            }
        }
    }
}

impl<T: Scalar> Params<T> for TextEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f(join(prefix, "tok_emb"), &self.tok_emb);
        f(join(prefix, "pos"), &self.pos);
        self.stack.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        f(join(prefix, "tok_emb"), &mut self.tok_emb);
        f(join(prefix, "pos"), &mut self.pos);
        self.stack.visit_mut(prefix, f);
    }
}
