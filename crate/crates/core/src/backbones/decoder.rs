use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use super::nn::{join, uniform, Params, Stack, StackCache};
use super::text::pack;
use super::DecoderConfig;
use crate::data::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Causal language decoder with an input embedding table tied to the output head.
///
/// The table covers the base vocabulary only. The RET row is supplied by the
/// caller (it belongs to the bridge) and is used both as the RET input
/// embedding and as the RET column of the output head. Positions holding the
/// IMG placeholder take their input embedding from the supplied visual rows,
/// consumed in order of appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub cfg: DecoderConfig,
    pub tok_emb: Array2<T>,
    pub pos: Array2<T>,
    pub stack: Stack<T>,
}

/// Result of one packed forward pass.
pub struct DecoderPass<T> {
    pub ids: Vec<u32>,
    pub segments: Vec<Range<usize>>,
    /// Final (post layer norm) hidden state per row.
    pub hidden: Array2<T>,
    cache: Option<StackCache<T>>,
}

impl<T: Scalar> DecoderPass<T> {
    /// Rows holding IMG placeholders, in consumption order.
    pub fn image_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == Vocabulary::IMG)
            .map(|(r, _)| r)
    }

    pub fn rows_with(&self, id: u32) -> impl Iterator<Item = usize> + '_ {
        self.ids
            .iter()
            .enumerate()
            .filter(move |(_, &i)| i == id)
            .map(|(r, _)| r)
    }
}

impl<T: Scalar> Decoder<T> {
    pub fn init<R: Rng>(rng: &mut R, cfg: DecoderConfig) -> Self {
        let d = cfg.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        Decoder {
            cfg,
            tok_emb: uniform(rng, cfg.vocab_size - 1, d, bound),
            pos: uniform(rng, cfg.context_len, d, bound),
            stack: Stack::init(rng, d, cfg.n_layers, cfg.n_heads, true),
        }
    }

    pub fn ret_id(&self) -> u32 {
        (self.cfg.vocab_size - 1) as u32
    }

    /// Mean of the base embedding rows; the starting point for a new token row.
    pub fn mean_embedding(&self) -> Array1<T> {
        self.tok_emb.mean_axis(Axis(0)).expect("non-empty table")
    }

    fn embed(
        &self,
        ids: &[u32],
        segments: &[Range<usize>],
        visual: &Array2<T>,
        ret: ArrayView1<T>,
    ) -> Result<Array2<T>> {
        let d = self.cfg.embed_dim;
        if visual.ncols() != d && visual.nrows() > 0 {
            return Err(Error::Shape(format!("visual prefix width {} != {d}", visual.ncols())));
        }
        if ret.len() != d {
            return Err(Error::Shape(format!("ret embedding width {} != {d}", ret.len())));
        }
        let ret_id = self.ret_id();
        let mut next_visual = 0;
        let mut x = Array2::<T>::zeros((ids.len(), d));
        for seg in segments {
            for (p, row) in seg.clone().enumerate() {
                let id = ids[row];
                let mut r = x.row_mut(row);
                if id == Vocabulary::IMG {
                    if next_visual >= visual.nrows() {
                        return Err(Error::Shape("more IMG placeholders than visual embeddings".into()));
                    }
                    r.assign(&visual.row(next_visual));
                    next_visual += 1;
                } else if id == ret_id {
                    r.assign(&ret);
                } else if (id as usize) < self.tok_emb.nrows() {
                    r.assign(&self.tok_emb.row(id as usize));
                } else {
                    return Err(Error::InvalidArgument(format!("token id {id} outside vocabulary")));
                }
                r += &self.pos.row(p);
            }
        }
        if next_visual != visual.nrows() {
            return Err(Error::Shape(format!(
                "{} visual embeddings supplied for {next_visual} IMG placeholders",
                visual.nrows()
            )));
        }
        Ok(x)
    }

    /// Runs packed sequences. `keep_cache` is needed for a later backward call.
    pub fn run(
        &self,
        seqs: &[&[u32]],
        visual: &Array2<T>,
        ret: ArrayView1<T>,
        keep_cache: bool,
    ) -> Result<DecoderPass<T>> {
        let (ids, segments) = pack(seqs, self.cfg.context_len)?;
        let x = self.embed(&ids, &segments, visual, ret)?;
        let (hidden, cache) = if keep_cache {
            let (h, c) = self.stack.forward(x, &segments);
            (h, Some(c))
        } else {
            (self.stack.infer(x, &segments), None)
        };
        Ok(DecoderPass {
            ids,
            segments,
            hidden,
            cache,
        })
    }

    /// Tied output head: `hidden . [tok_emb; ret]^T`.
    pub fn logits(&self, hidden: &Array2<T>, ret: ArrayView1<T>) -> Array2<T> {
        let base = hidden.dot(&self.tok_emb.t());
        let ret_col = hidden.dot(&ret).insert_axis(Axis(1));
        concatenate![Axis(1), base, ret_col]
    }

    /// Backward through the tied head. Returns d(hidden) and adds to `d_ret`.
    pub fn logits_backward(
        &self,
        hidden: &Array2<T>,
        ret: ArrayView1<T>,
        d_logits: &Array2<T>,
        d_ret: &mut Array1<T>,
    ) -> Array2<T> {
        let v = self.tok_emb.nrows();
        let d_base = d_logits.slice(s![.., ..v]);
        let d_ret_col = d_logits.column(v);
        *d_ret += &hidden.t().dot(&d_ret_col);
        let mut dh = d_base.dot(&self.tok_emb);
        for (mut row, &g) in dh.rows_mut().into_iter().zip(d_ret_col.iter()) {
            row.scaled_add(g, &ret);
        }
        dh
    }

    /// Gradient with respect to the input embedding rows (parameters untouched).
    pub fn backward_inputs(&self, pass: &DecoderPass<T>, d_hidden: &Array2<T>) -> Array2<T> {
        let cache = pass.cache.as_ref().expect("forward run without cache");
        self.stack.backward(cache, &pass.segments, d_hidden, None)
    }

    /// Parameter gradients for language-model pretraining. Sequences must not
    /// contain RET; IMG rows must have been fed the IMG token row.
    pub fn backward_params(&self, pass: &DecoderPass<T>, d_hidden: &Array2<T>, grads: &mut Self) {
        let cache = pass.cache.as_ref().expect("forward run without cache");
        let dx = self
            .stack
            .backward(cache, &pass.segments, d_hidden, Some(&mut grads.stack));
        for seg in &pass.segments {
            for (p, row) in seg.clone().enumerate() {
                let d = dx.row(row);
                let mut t = grads.tok_emb.row_mut(pass.ids[row] as usize);
                t += &d;
                let mut q = grads.pos.row_mut(p);
                q += &d;
            }
        }
    }

    /// Logits and hidden rows for one sequence: `prefix` rows first, then `tokens`.
    pub fn forward_with_prefix(
        &self,
        prefix: &Array2<T>,
        tokens: &TokenSequence,
        ret: ArrayView1<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        let mut ids = vec![Vocabulary::IMG; prefix.nrows()];
        ids.extend_from_slice(&tokens.ids);
        let pass = self.run(&[&ids], prefix, ret, false)?;
        let logits = self.logits(&pass.hidden, ret);
        Ok((logits, pass.hidden))
    }

    /// Final hidden state at the RET position, which must be the last token.
    pub fn hidden_at_ret(&self, prefix: &Array2<T>, tokens: &TokenSequence, ret: ArrayView1<T>) -> Result<Array1<T>> {
        if tokens.ids.last() != Some(&self.ret_id()) {
            return Err(Error::InvalidArgument("sequence does not end with RET".into()));
        }
        let (_, hidden) = self.forward_with_prefix(prefix, tokens, ret)?;
        Ok(hidden.row(hidden.nrows() - 1).to_owned())
    }
}

impl<T: Scalar> Params<T> for Decoder<T> {
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
