//! Losses: cosine similarity, bidirectional InfoNCE, captioning cross-entropy
//! and their weighted combination.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `a.b / (|a| |b|)`; zero-norm inputs give 0.
pub fn cosine_similarity<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == T::zero() || nb == T::zero() {
        tracing::warn!("cosine similarity of a zero-norm vector; returning 0");
        return Ok(T::zero());
    }
    let c = a.dot(&b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Text rows are queries, image rows are candidates.
    T2i,
    /// Image rows are queries, text rows are candidates.
    I2t,
}

/// Rows scaled to unit length (zero rows stay zero) and the original norms.
fn unit_rows<T: Scalar>(x: &Array2<T>) -> (Array2<T>, Vec<T>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > T::zero() {
            row.mapv_inplace(|v| v / n);
        }
        norms.push(n);
    }
    (out, norms)
}

/// `N x N` cosine similarities, entry `(i, j)` = cos(text_i, image_j).
pub fn similarity_matrix<T: Scalar>(text_rows: &Array2<T>, image_rows: &Array2<T>) -> Result<Array2<T>> {
    if text_rows.ncols() != image_rows.ncols() {
        return Err(Error::Shape("similarity rows of different widths".into()));
    }
    let (u, _) = unit_rows(text_rows);
    let (v, _) = unit_rows(image_rows);
    Ok(u.dot(&v.t()).mapv(|c| c.max(-T::one()).min(T::one())))
}

fn check_pair<T: Scalar>(u: &Array2<T>, v: &Array2<T>, tau: T) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::Shape(format!("InfoNCE inputs {:?} vs {:?}", u.dim(), v.dim())));
    }
    if u.nrows() == 0 {
        return Err(Error::InvalidArgument("InfoNCE needs at least one pair".into()));
    }
    if tau.is_nan() || tau <= T::zero() {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    Ok(())
}

/// Mean over rows of `logsumexp(row) - row[diag]`, plus the row softmax.
fn row_nce<T: Scalar>(scores: &Array2<T>) -> (T, Array2<T>) {
    let n = scores.nrows();
    let mut probs = Array2::<T>::zeros(scores.raw_dim());
    let mut total = T::zero();
    for i in 0..n {
        let row = scores.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&s| (s - max).exp()).sum();
        total += sum.ln() + max - row[i];
        for j in 0..n {
            probs[[i, j]] = (row[j] - max).exp() / sum;
        }
    }
    (total / T::lit(n as f64), probs)
}

/// In-batch InfoNCE: pair `i` is the positive for query `i`, all other rows
/// of the candidate side are negatives.
pub fn info_nce<T: Scalar>(u_rows: &Array2<T>, v_rows: &Array2<T>, tau: T, direction: Direction) -> Result<T> {
    check_pair(u_rows, v_rows, tau)?;
    let scores = similarity_matrix(u_rows, v_rows)? / tau;
    let scores = match direction {
        Direction::T2i => scores,
        Direction::I2t => scores.t().to_owned(),
    };
    let loss = row_nce(&scores).0;
    Ok(if loss < T::zero() { T::zero() } else { loss })
}

/// Both InfoNCE directions with gradients of `weight * (t2i + i2t)`.
#[derive(Clone, Debug)]
pub struct ContrastiveGrads<T> {
    pub t2i: T,
    pub i2t: T,
    pub d_text: Array2<T>,
    pub d_image: Array2<T>,
    pub d_log_tau: T,
}

pub fn info_nce_both_with_grads<T: Scalar>(
    text_rows: &Array2<T>,
    image_rows: &Array2<T>,
    log_tau: T,
    weight: T,
) -> Result<ContrastiveGrads<T>> {
    let tau = log_tau.exp();
    check_pair(text_rows, image_rows, tau)?;
    let n = T::lit(text_rows.nrows() as f64);
    let (u, u_norm) = unit_rows(text_rows);
    let (v, v_norm) = unit_rows(image_rows);
    let cos = u.dot(&v.t());
    let scores = &cos / tau;
    let (t2i, p_t2i) = row_nce(&scores);
    let (i2t, p_i2t) = row_nce(&scores.t().to_owned());

    // d/dscores of weight * (t2i + i2t)
    let mut d_scores = p_t2i + p_i2t.t();
    for i in 0..text_rows.nrows() {
        d_scores[[i, i]] -= T::lit(2.0);
    }
    d_scores.mapv_inplace(|g| g * weight / n);
    let d_log_tau = -(&d_scores * &scores).sum();
    let d_cos = d_scores / tau;

    let du_hat = d_cos.dot(&v);
    let dv_hat = d_cos.t().dot(&u);
    let through_norm = |hat: &Array2<T>, d_hat: Array2<T>, norms: &[T]| {
        let mut d = d_hat;
        for ((mut row, h), &norm) in d.rows_mut().into_iter().zip(hat.rows()).zip(norms) {
            if norm == T::zero() {
                row.fill(T::zero());
                continue;
            }
            let along = row.dot(&h);
            row.zip_mut_with(&h, |g, &hv| *g = (*g - along * hv) / norm);
        }
        d
    };
    Ok(ContrastiveGrads {
        t2i,
        i2t,
        d_text: through_norm(&u, du_hat, &u_norm),
        d_image: through_norm(&v, dv_hat, &v_norm),
        d_log_tau,
    })
}

/// Mean of `-log softmax(logits[t])[targets[t]]` over positions where `mask[t]`.
pub fn captioning_cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[u32], mask: &[bool]) -> Result<T> {
    Ok(cross_entropy_with_grads(logits, targets, mask, T::one(), false)?.0)
}

/// Loss and, when `want_grad`, `weight * d(loss)/d(logits)`.
pub fn cross_entropy_with_grads<T: Scalar>(
    logits: &Array2<T>,
    targets: &[u32],
    mask: &[bool],
    weight: T,
    want_grad: bool,
) -> Result<(T, Option<Array2<T>>)> {
    if targets.len() != logits.nrows() || mask.len() != logits.nrows() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("empty loss mask".into()));
    }
    let vocab = logits.ncols();
    let mut grad = want_grad.then(|| Array2::<T>::zeros(logits.raw_dim()));
    let mut total = T::zero();
    let scale = weight / T::lit(count as f64);
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let target = target as usize;
        if target >= vocab {
            return Err(Error::InvalidArgument(format!(
                "target {target} outside {vocab} logits"
            )));
        }
        let row = logits.row(t);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&s| (s - max).exp()).sum();
        total += sum.ln() + max - row[target];
        if let Some(g) = grad.as_mut() {
            let mut gr = g.row_mut(t);
            for (j, gv) in gr.iter_mut().enumerate() {
                *gv = (row[j] - max).exp() / sum * scale;
            }
            gr[target] -= scale;
        }
    }
    let mean = total / T::lit(count as f64);
    // Rounding can leave a tiny negative; NaN must pass through.
    Ok((if mean < T::zero() { T::zero() } else { mean }, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_t2i: f64,
    pub l_i2t: f64,
    pub l_total: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
}

/// `lambda_c * l_c + lambda_r * (l_t2i + l_i2t)`
pub fn combined_loss(l_c: f64, l_t2i: f64, l_i2t: f64, lambda_c: f64, lambda_r: f64) -> Result<LossBreakdown> {
    if lambda_c < 0.0 || lambda_r < 0.0 {
        return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
    }
    Ok(LossBreakdown {
        l_c,
        l_t2i,
        l_i2t,
        l_total: lambda_c * l_c + lambda_r * (l_t2i + l_i2t),
        lambda_c,
        lambda_r,
    })
}
