//! Caption metrics over normalized word tokens: corpus BLEU-1..4 without
//! smoothing, ROUGE-L, and CIDEr-D.

use std::collections::{HashMap, HashSet};

use crate::data::normalize_words;
use crate::error::{Error, Result};

const ROUGE_BETA: f64 = 1.2;
const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

type Ngram = Vec<String>;

fn ngram_counts(words: &[String], n: usize) -> HashMap<Ngram, usize> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

fn check_refs(references: &[String]) -> Result<()> {
    if references.is_empty() {
        return Err(Error::InvalidArgument("at least one reference is required".into()));
    }
    Ok(())
}

/// Clipped n-gram matches, hypothesis n-gram totals, hypothesis length and
/// closest reference length (ties go to the shorter reference).
#[derive(Clone, Debug, Default, PartialEq)]
struct BleuStats {
    matches: [usize; MAX_N],
    totals: [usize; MAX_N],
    hyp_len: usize,
    ref_len: usize,
}

fn bleu_stats(hyp: &[String], refs: &[Vec<String>]) -> BleuStats {
    let mut s = BleuStats {
        hyp_len: hyp.len(),
        ..BleuStats::default()
    };
    s.ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
        .unwrap_or(0);
    for n in 1..=MAX_N {
        let h = ngram_counts(hyp, n);
        let mut max_ref: HashMap<&Ngram, usize> = HashMap::new();
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        for rc in &ref_counts {
            for (g, &c) in rc {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        s.matches[n - 1] = h
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    s
}

fn bleu_from_stats(s: &BleuStats, n: usize) -> f64 {
    if s.hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if s.matches[k] == 0 || s.totals[k] == 0 {
            return 0.0;
        }
        log_sum += (s.matches[k] as f64 / s.totals[k] as f64).ln();
    }
    let bp = if s.hyp_len < s.ref_len {
        (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / n as f64).exp()
}

fn check_order(n: usize) -> Result<()> {
    if !(1..=MAX_N).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order {n} outside 1..={MAX_N}")));
    }
    Ok(())
}

/// BLEU-n of one hypothesis against its references.
pub fn bleu(hypothesis: &str, references: &[String], n: usize) -> Result<f64> {
    corpus_bleu(&[hypothesis.to_string()], &[references.to_vec()], n)
}

/// Corpus BLEU-n: clipped counts and lengths are summed over the corpus
/// before the precisions and the brevity penalty are formed.
pub fn corpus_bleu(hypotheses: &[String], references: &[Vec<String>], n: usize) -> Result<f64> {
    check_order(n)?;
    if hypotheses.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} hypotheses, {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut total = BleuStats::default();
    for (h, refs) in hypotheses.iter().zip(references) {
        check_refs(refs)?;
        let refs: Vec<Vec<String>> = refs.iter().map(|r| normalize_words(r)).collect();
        let s = bleu_stats(&normalize_words(h), &refs);
        for k in 0..MAX_N {
            total.matches[k] += s.matches[k];
            total.totals[k] += s.totals[k];
        }
        total.hyp_len += s.hyp_len;
        total.ref_len += s.ref_len;
    }
    Ok(bleu_from_stats(&total, n))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS-based F-measure with beta = 1.2, maximized over references.
pub fn rouge_l(hypothesis: &str, references: &[String]) -> Result<f64> {
    check_refs(references)?;
    let h = normalize_words(hypothesis);
    if h.is_empty() {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let best = references
        .iter()
        .map(|r| {
            let r = normalize_words(r);
            let l = lcs(&h, &r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rec) = (l / h.len() as f64, l / r.len() as f64);
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max);
    Ok(best)
}

/// Per-order tf-idf vectors, their norms, and the bigram count used as the
/// sentence length by the length penalty.
struct CiderVec {
    vec: Vec<HashMap<Ngram, f64>>,
    norm: Vec<f64>,
    length: f64,
}

fn cider_vec(words: &[String], df: &HashMap<Ngram, f64>, log_n: f64) -> CiderVec {
    let mut vec = vec![HashMap::new(); MAX_N];
    let mut norm = vec![0.0; MAX_N];
    let mut length = 0.0;
    for n in 1..=MAX_N {
        for (g, tf) in ngram_counts(words, n) {
            let idf = log_n - df.get(&g).copied().unwrap_or(0.0).max(1.0).ln();
            let w = tf as f64 * idf;
            norm[n - 1] += w * w;
            if n == 2 {
                length += tf as f64;
            }
            vec[n - 1].insert(g, w);
        }
    }
    CiderVec {
        vec,
        norm: norm.into_iter().map(f64::sqrt).collect(),
        length,
    }
}

fn cider_sim(h: &CiderVec, r: &CiderVec) -> f64 {
    let delta = h.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut val: f64 = h.vec[n]
            .iter()
            .map(|(g, &hv)| {
                let rv = r.vec[n].get(g).copied().unwrap_or(0.0);
                hv.min(rv) * rv
            })
            .sum();
        if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val /= h.norm[n] * r.norm[n];
        }
        total += val * penalty;
    }
    total / MAX_N as f64
}

/// CIDEr-D per image and the corpus mean. Document frequencies come from the
/// reference sets, so at least two images are needed.
pub fn cider_d(hypotheses: &[String], references: &[Vec<String>]) -> Result<(f64, Vec<f64>)> {
    if hypotheses.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} hypotheses, {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.len() < 2 {
        return Err(Error::InvalidArgument("CIDEr-D needs at least two images".into()));
    }
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| {
            check_refs(rs)?;
            Ok(rs.iter().map(|r| normalize_words(r)).collect())
        })
        .collect::<Result<_>>()?;
    let mut df: HashMap<Ngram, f64> = HashMap::new();
    for rs in &refs {
        let mut seen: HashSet<Ngram> = HashSet::new();
        for r in rs {
            for n in 1..=MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (refs.len() as f64).ln();
    let scores: Vec<f64> = hypotheses
        .iter()
        .zip(&refs)
        .map(|(h, rs)| {
            let hv = cider_vec(&normalize_words(h), &df, log_n);
            let sum: f64 = rs.iter().map(|r| cider_sim(&hv, &cider_vec(r, &df, log_n))).sum();
            sum / rs.len() as f64 * 10.0
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bleu_fixtures() {
        let refs = s(&["the cat sat down"]);
        assert!((bleu("the cat sat", &refs, 1).unwrap() - 0.716531).abs() < 1e-6);
        assert_eq!(bleu("", &refs, 1).unwrap(), 0.0);
        assert_eq!(bleu("dog ran", &refs, 1).unwrap(), 0.0);
        for n in 1..=4 {
            assert!((bleu("the cat sat down", &refs, n).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(bleu("x", &[], 1).is_err());
        assert!(bleu("x", &refs, 5).is_err());
    }

    #[test]
    fn rouge_fixtures() {
        assert_eq!(rouge_l("a b c", &s(&["a b c"])).unwrap(), 1.0);
        assert_eq!(rouge_l("a b c", &s(&["d e"])).unwrap(), 0.0);
        // LCS 2 of 3 on both sides: P = R = 2/3, so F = 2/3 for any beta
        assert!((rouge_l("a b c", &s(&["a c d"])).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l("", &s(&["a"])).unwrap(), 0.0);
    }

    #[test]
    fn cider_perfect_and_disjoint() {
        let refs = vec![s(&["a red square on water"]), s(&["two tanks near a runway"])];
        let (mean, _) = cider_d(&s(&["a red square on water", "two tanks near a runway"]), &refs).unwrap();
        assert!((mean - 10.0).abs() < 1e-9);
        let (mean, _) = cider_d(&s(&["zzz yyy", "qqq"]), &refs).unwrap();
        assert_eq!(mean, 0.0);
        assert!(cider_d(&s(&["a"]), &[s(&["a"])]).is_err());
    }

    fn oracle_corpus() -> (Vec<String>, Vec<Vec<String>>) {
        let hyps = s(&[
            "a red square on the water",
            "two tanks beside a runway",
            "three green trees in a field",
        ]);
        let refs = vec![
            s(&[
                "a red square on blue water",
                "a small red square in the water",
                "red square floating on water",
            ]),
            s(&["two tanks near a long runway", "a runway with two tanks beside it"]),
            s(&[
                "a green field with three trees",
                "three trees in a green field",
                "green grass and three trees",
            ]),
        ];
        (hyps, refs)
    }

    // Expected values computed with pycocoevalcap 1.2 on the same corpus.
    #[test]
    fn corpus_matches_coco_oracle() {
        let (hyps, refs) = oracle_corpus();
        let expect_bleu = [0.942873144, 0.755980342, 0.580827529, 0.389830858];
        for (n, e) in (1..=4).zip(expect_bleu) {
            let got = corpus_bleu(&hyps, &refs, n).unwrap();
            assert!((got - e).abs() < 1e-6, "BLEU-{n}: {got} vs {e}");
        }
        let (mean, per) = cider_d(&hyps, &refs).unwrap();
        assert!((mean - 3.183232829).abs() < 1e-6, "{mean}");
        for (got, e) in per.iter().zip([3.651139366, 3.175516145, 2.723042977]) {
            assert!((got - e).abs() < 1e-6, "{got} vs {e}");
        }
        for ((h, r), e) in hyps.iter().zip(&refs).zip([0.833333333, 0.715542522, 0.833333333]) {
            let got = rouge_l(h, r).unwrap();
            assert!((got - e).abs() < 1e-6, "{got} vs {e}");
        }
        let single = rouge_l(&hyps[2], &refs[2][..1]).unwrap();
        assert!((single - 1.0 / 3.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn metrics_ignore_reference_order(
            hyp in proptest::collection::vec(0u8..5, 0..8),
            refs in proptest::collection::vec(proptest::collection::vec(0u8..5, 1..8), 1..4),
        ) {
            let text = |w: &[u8]| w.iter().map(|c| format!("w{c}")).collect::<Vec<_>>().join(" ");
            let h = text(&hyp);
            let r: Vec<String> = refs.iter().map(|x| text(x)).collect();
            let mut rev = r.clone();
            rev.reverse();
            for n in 1..=4 {
                prop_assert_eq!(bleu(&h, &r, n).unwrap(), bleu(&h, &rev, n).unwrap());
            }
            prop_assert_eq!(rouge_l(&h, &r).unwrap(), rouge_l(&h, &rev).unwrap());
            let rouge = rouge_l(&h, &r).unwrap();
            prop_assert_eq!(rouge == 1.0, r.iter().any(|x| normalize_words(x) == normalize_words(&h)) && !hyp.is_empty());
        }
    }
}
