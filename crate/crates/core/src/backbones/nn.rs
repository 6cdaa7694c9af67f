//! Transformer building blocks with explicit backward passes.
//!
//! Every parameter is an `Array2` (biases and gains are `1 x n` rows) so that
//! optimizers, digests and checkpoints can treat all tensors uniformly.
//! Sequences are packed row-wise: a batch is one `rows x d` matrix plus a list
//! of segments, and attention never crosses a segment boundary.

use std::ops::Range;

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::tensor::Scalar;

/// Visits named parameter tensors. Gradient holders reuse the model types, so
/// the same visitor pairs parameters with their gradients.
pub trait Params<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>));

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, a| a.fill(T::zero()));
        z
    }

    fn named(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, a| out.push((n, a)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in `[-bound, bound]`.
pub(crate) fn uniform<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::lit(rng.random_range(-bound..=bound)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `in x out`
    pub weight: Array2<T>,
    /// `1 x out`
    pub bias: Array2<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: uniform(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grads: Option<&mut Self>) -> Array2<T> {
        if let Some(g) = grads {
            g.weight += &x.t().dot(dy);
            g.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&self.weight.t())
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array2<T>,
    pub beta: Array2<T>,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::lit(x.ncols() as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.iter().copied().sum::<T>() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let r = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd.push(r);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Array2<T>, grads: Option<&mut Self>) -> Array2<T> {
        if let Some(g) = grads {
            g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
            g.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let d = T::lit(dy.ncols() as f64);
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
            let mean_d = row.iter().copied().sum::<T>() / d;
            let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
            for (v, &h) in row.iter_mut().zip(xh.iter()) {
                *v = r * (*v - mean_d - h * mean_dx);
            }
        }
        dx
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

// tanh approximation of GELU
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct MlpCache<T> {
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Mlp {
            fc1: Linear::init(rng, dim, 4 * dim),
            fc2: Linear::init(rng, 4 * dim, dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        (self.fc2.forward(&act), MlpCache { pre, act })
    }

    pub fn backward(&self, x: &Array2<T>, cache: &MlpCache<T>, dy: &Array2<T>, grads: Option<&mut Self>) -> Array2<T> {
        let (g1, g2) = match grads {
            Some(g) => (Some(&mut g.fc1), Some(&mut g.fc2)),
            None => (None, None),
        };
        let mut dact = self.fc2.backward(&cache.act, dy, g2);
        ndarray::Zip::from(&mut dact)
            .and(&cache.pre)
            .for_each(|d, &p| *d *= gelu_grad(p));
        self.fc1.backward(x, &dact, g1)
    }
}

impl<T: Scalar> Params<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Multi-head self-attention over packed segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub n_heads: usize,
    pub causal: bool,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
}

pub struct AttentionCache<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// attention probabilities, one `len x len` block per (segment, head)
    probs: Vec<Vec<T>>,
    mixed: Array2<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, n_heads: usize, causal: bool) -> Self {
        Attention {
            n_heads,
            causal,
            q: Linear::init(rng, dim, dim),
            k: Linear::init(rng, dim, dim),
            v: Linear::init(rng, dim, dim),
            out: Linear::init(rng, dim, dim),
        }
    }

    fn head_dim(&self) -> usize {
        self.q.weight.ncols() / self.n_heads
    }

    pub fn forward(&self, x: &Array2<T>, segments: &[Range<usize>]) -> (Array2<T>, AttentionCache<T>) {
        let (q, k, v) = (self.q.forward(x), self.k.forward(x), self.v.forward(x));
        let dh = self.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut mixed = Array2::<T>::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(segments.len() * self.n_heads);
        for seg in segments {
            let len = seg.len();
            for h in 0..self.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = vec![T::zero(); len * len];
                for i in 0..len {
                    let qi = q.slice(s![seg.start + i, cols.clone()]);
                    let qi = qi.as_slice().expect("contiguous row");
                    let last = if self.causal { i } else { len - 1 };
                    let row = &mut p[i * len..(i + 1) * len];
                    let mut max = T::neg_infinity();
                    for (j, slot) in row.iter_mut().enumerate().take(last + 1) {
                        let kj = k.slice(s![seg.start + j, cols.clone()]);
                        let dot = qi.iter().zip(kj.as_slice().unwrap()).map(|(&a, &b)| a * b).sum::<T>();
                        *slot = dot * scale;
                        max = max.max(*slot);
                    }
                    let mut total = T::zero();
                    for r in row.iter_mut().take(last + 1) {
                        *r = (*r - max).exp();
                        total += *r;
                    }
                    for r in row.iter_mut().take(last + 1) {
                        *r /= total;
                    }
                    let mut o = mixed.slice_mut(s![seg.start + i, cols.clone()]);
                    for (j, &pij) in row.iter().enumerate().take(last + 1) {
                        let vj = v.slice(s![seg.start + j, cols.clone()]);
                        o.zip_mut_with(&vj, |a, &b| *a += pij * b);
                    }
                }
                probs.push(p);
            }
        }
        let y = self.out.forward(&mixed);
        (y, AttentionCache { q, k, v, probs, mixed })
    }

    pub fn backward(
        &self,
        x: &Array2<T>,
        cache: &AttentionCache<T>,
        segments: &[Range<usize>],
        dy: &Array2<T>,
        grads: Option<&mut Self>,
    ) -> Array2<T> {
        let (mut gq, mut gk, mut gv, gout) = match grads {
            Some(g) => (Some(&mut g.q), Some(&mut g.k), Some(&mut g.v), Some(&mut g.out)),
            None => (None, None, None, None),
        };
        let dmixed = self.out.backward(&cache.mixed, dy, gout);
        let dh = self.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = Array2::<T>::zeros(cache.q.raw_dim());
        let mut dk = Array2::<T>::zeros(cache.k.raw_dim());
        let mut dv = Array2::<T>::zeros(cache.v.raw_dim());
        let mut dp = Vec::new();
        for (si, seg) in segments.iter().enumerate() {
            let len = seg.len();
            for h in 0..self.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &cache.probs[si * self.n_heads + h];
                for i in 0..len {
                    let last = if self.causal { i } else { len - 1 };
                    let row = &p[i * len..(i + 1) * len];
                    let doi = dmixed.slice(s![seg.start + i, cols.clone()]);
                    dp.clear();
                    let mut weighted = T::zero();
                    for (j, &pij) in row.iter().enumerate().take(last + 1) {
                        let vj = cache.v.slice(s![seg.start + j, cols.clone()]);
                        let d = doi.iter().zip(vj.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        dp.push(d);
                        weighted += pij * d;
                        let mut dvj = dv.slice_mut(s![seg.start + j, cols.clone()]);
                        dvj.zip_mut_with(&doi, |a, &b| *a += pij * b);
                    }
                    let qi = cache.q.slice(s![seg.start + i, cols.clone()]);
                    for j in 0..=last {
                        let ds = row[j] * (dp[j] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = cache.k.slice(s![seg.start + j, cols.clone()]);
                        dq.slice_mut(s![seg.start + i, cols.clone()])
                            .zip_mut_with(&kj, |a, &b| *a += ds * b);
                        dk.slice_mut(s![seg.start + j, cols.clone()])
                            .zip_mut_with(&qi, |a, &b| *a += ds * b);
                    }
                }
            }
        }
        let mut dx = self.q.backward(x, &dq, gq.take());
        dx += &self.k.backward(x, &dk, gk.take());
        dx += &self.v.backward(x, &dv, gv.take());
        dx
    }
}

impl<T: Scalar> Params<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `+ mlp(ln2(.))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    ln1_out: Array2<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    ln2_out: Array2<T>,
    mlp: MlpCache<T>,
}

impl<T: Scalar> Block<T> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, n_heads: usize, causal: bool) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Attention::init(rng, dim, n_heads, causal),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::init(rng, dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>, segments: &[Range<usize>]) -> (Array2<T>, BlockCache<T>) {
        let (ln1_out, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&ln1_out, segments);
        let x1 = x + &a;
        let (ln2_out, ln2) = self.ln2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&ln2_out);
        let y = x1 + &m;
        (
            y,
            BlockCache {
                ln1,
                ln1_out,
                attn,
                ln2,
                ln2_out,
                mlp,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        segments: &[Range<usize>],
        dy: &Array2<T>,
        grads: Option<&mut Self>,
    ) -> Array2<T> {
        let (gln1, gattn, gln2, gmlp) = match grads {
            Some(g) => (Some(&mut g.ln1), Some(&mut g.attn), Some(&mut g.ln2), Some(&mut g.mlp)),
            None => (None, None, None, None),
        };
        let dln2 = self.mlp.backward(&cache.ln2_out, &cache.mlp, dy, gmlp);
        let dx1 = dy + &self.ln2.backward(&cache.ln2, &dln2, gln2);
        let dln1 = self.attn.backward(&cache.ln1_out, &cache.attn, segments, &dx1, gattn);
        dx1.clone() + &self.ln1.backward(&cache.ln1, &dln1, gln1)
    }
}

impl<T: Scalar> Params<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack<T> {
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
}

pub struct StackCache<T> {
    blocks: Vec<BlockCache<T>>,
    ln_f: LayerNormCache<T>,
}

impl<T: Scalar> Stack<T> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, n_layers: usize, n_heads: usize, causal: bool) -> Self {
        Stack {
            blocks: (0..n_layers).map(|_| Block::init(rng, dim, n_heads, causal)).collect(),
            ln_f: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: Array2<T>, segments: &[Range<usize>]) -> (Array2<T>, StackCache<T>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for b in &self.blocks {
            let (next, c) = b.forward(&h, segments);
            caches.push(c);
            h = next;
        }
        let (y, ln_f) = self.ln_f.forward(&h);
        (y, StackCache { blocks: caches, ln_f })
    }

    /// Forward pass without keeping activations.
    pub fn infer(&self, x: Array2<T>, segments: &[Range<usize>]) -> Array2<T> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(&h, segments).0;
        }
        self.ln_f.forward(&h).0
    }

    pub fn backward(
        &self,
        cache: &StackCache<T>,
        segments: &[Range<usize>],
        dy: &Array2<T>,
        mut grads: Option<&mut Self>,
    ) -> Array2<T> {
        let mut d = self
            .ln_f
            .backward(&cache.ln_f, dy, grads.as_deref_mut().map(|g| &mut g.ln_f));
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let g = grads.as_deref_mut().map(|g| &mut g.blocks[i]);
            d = b.backward(&cache.blocks[i], segments, &d, g);
        }
        d
    }
}

impl<T: Scalar> Params<T> for Stack<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Central-difference check of d(sum(w * f(x)))/dx and the parameter gradients.
    fn check_stack(causal: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack: Stack<f64> = Stack::init(&mut rng, 8, 2, 2, causal);
        let segs = vec![0..3, 3..7];
        let x: Array2<f64> = uniform(&mut rng, 7, 8, 1.0);
        let w: Array2<f64> = uniform(&mut rng, 7, 8, 1.0);
        let loss = |s: &Stack<f64>, x: &Array2<f64>| (s.infer(x.clone(), &segs) * &w).sum();

        let (_, cache) = stack.forward(x.clone(), &segs);
        let mut grads = stack.zeros_like();
        let dx = stack.backward(&cache, &segs, &w, Some(&mut grads));

        let eps = 1e-6;
        let mut max_err: f64 = 0.0;
        for idx in [(0, 0), (2, 5), (4, 1), (6, 7)] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += eps;
            xm[idx] -= eps;
            let fd = (loss(&stack, &xp) - loss(&stack, &xm)) / (2.0 * eps);
            max_err = max_err.max((fd - dx[idx]).abs() / fd.abs().max(1e-3));
        }
        let names: Vec<String> = grads.named().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let g = grads.named().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
            for flat in [0, g.len() / 2, g.len() - 1] {
                let idx = (flat / g.ncols(), flat % g.ncols());
                let perturb = |delta: f64| {
                    let mut s = stack.clone();
                    s.visit_mut("", &mut |n, a| {
                        if n == name {
                            a[idx] += delta;
                        }
                    });
                    loss(&s, &x)
                };
                let fd = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
                max_err = max_err.max((fd - g[idx]).abs() / fd.abs().max(1e-3));
            }
        }
        assert!(max_err < 1e-5, "max relative error {max_err}");
    }

    #[test]
    fn causal_stack_gradients() {
        check_stack(true);
    }

    #[test]
    fn bidirectional_stack_gradients() {
        check_stack(false);
    }

    #[test]
    fn segments_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stack: Stack<f32> = Stack::init(&mut rng, 8, 1, 2, false);
        let x: Array2<f32> = uniform(&mut rng, 6, 8, 1.0);
        let packed = stack.infer(x.clone(), &[0..2, 2..6]);
        let alone = stack.infer(x.slice(s![2..6, ..]).to_owned(), std::slice::from_ref(&(0..4)));
        assert_eq!(packed.slice(s![2..6, ..]), alone);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5f64] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
