//! Text-to-image retrieval: an exact cosine index over projected image
//! embeddings, RET-token query embeddings and recall@K.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::backbones::BackboneBundle;
use crate::bridge::Bridge;
use crate::checkpoint::{read_container, write_container};
use crate::data::{load_and_preprocess_image, DatasetManifest, ImageTensor, Split, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{digest, normalize_in_place};

pub const INDEX_TENSOR: &str = "index.vectors";
pub const INDEX_IDS_FILE: &str = "ids.json";
const ENCODE_CHUNK: usize = 16;

/// Unit-normalized image rows with parallel id and uri lists.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    uris: Vec<String>,
    vectors: Array2<f32>,
}

#[derive(Serialize, Deserialize)]
struct IdsFile {
    ids: Vec<String>,
    uris: Vec<String>,
}

impl RetrievalIndex {
    /// Normalizes every row of `embeddings`. Zero rows stay zero.
    pub fn from_embeddings(ids: Vec<String>, uris: Vec<String>, mut embeddings: Array2<f32>) -> Result<Self> {
        if ids.len() != uris.len() || ids.len() != embeddings.nrows() {
            return Err(Error::Shape(format!(
                "{} ids, {} uris, {} vectors",
                ids.len(),
                uris.len(),
                embeddings.nrows()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate image id {dup}")));
        }
        for mut row in embeddings.rows_mut() {
            normalize_in_place(row.as_slice_mut().expect("standard layout"));
        }
        Ok(RetrievalIndex {
            ids,
            uris,
            vectors: embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn uris(&self) -> &[String] {
        &self.uris
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.vectors
    }

    pub fn uri_of(&self, id: &str) -> Option<&str> {
        self.ids.iter().position(|i| i == id).map(|p| self.uris[p].as_str())
    }

    pub fn digest(&self) -> String {
        digest(&self.vectors)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_container(
            dir,
            &[(INDEX_TENSOR.to_string(), &self.vectors)],
            &serde_json::Value::Null,
            &serde_json::Value::Null,
        )?;
        let path = dir.join(INDEX_IDS_FILE);
        let file = IdsFile {
            ids: self.ids.clone(),
            uris: self.uris.clone(),
        };
        fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_IDS_FILE);
        if !path.exists() {
            return Err(Error::NotFound(format!("index not found at {}", dir.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: IdsFile = serde_json::from_str(&text).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
        let mut container = read_container::<f32>(dir)?;
        let vectors = container.take(INDEX_TENSOR, dir)?;
        if file.ids.len() != vectors.nrows() || file.uris.len() != vectors.nrows() {
            return Err(Error::checkpoint(dir, "ids.json does not match the index tensor"));
        }
        Ok(RetrievalIndex {
            ids: file.ids,
            uris: file.uris,
            vectors,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query: String,
    pub items: Vec<RankedItem>,
    /// Set when fewer than the requested `k` items exist.
    pub truncated: bool,
}

/// Indices of the `k` best scores; ties go to the smaller id.
pub fn top_k(scores: &[f32], ids: &[String], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    order.truncate(k);
    order
}

/// Exact top-k by cosine score. The query is normalized first, so any
/// positive rescaling of it yields the same ranking and scores.
pub fn search(index: &RetrievalIndex, query_id: &str, query: ArrayView1<f32>, k: usize) -> Result<RankedResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if query.len() != index.vectors.ncols() {
        return Err(Error::Shape(format!(
            "query length {} != index width {}",
            query.len(),
            index.vectors.ncols()
        )));
    }
    let mut q = query.to_owned();
    normalize_in_place(q.as_slice_mut().expect("owned vector"));
    let scores: Vec<f32> = index.vectors.dot(&q).iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    let order = top_k(&scores, &index.ids, k);
    Ok(RankedResult {
        query: query_id.to_string(),
        items: order
            .into_iter()
            .map(|i| RankedItem {
                id: index.ids[i].clone(),
                score: scores[i],
            })
            .collect(),
        truncated: k > index.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean: f64,
}

impl RecallTable {
    /// Table from R@1, R@5 and R@10 with their arithmetic mean.
    pub fn from_recalls(r1: f64, r5: f64, r10: f64) -> Self {
        RecallTable {
            r1,
            r5,
            r10,
            mean: (r1 + r5 + r10) / 3.0,
        }
    }
}

/// Percentage of queries whose ground truth is among their first `k` items,
/// one value per entry of `ks`.
pub fn recall_at_k(results: &[RankedResult], ground_truth: &HashMap<String, String>, ks: &[usize]) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no queries to score".into()));
    }
    let mut hits = vec![0usize; ks.len()];
    for r in results {
        let truth = ground_truth
            .get(&r.query)
            .ok_or_else(|| Error::InvalidArgument(format!("no ground truth for query {}", r.query)))?;
        let rank = r.items.iter().position(|it| &it.id == truth);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| 100.0 * h as f64 / results.len() as f64)
        .collect())
}

pub fn recall_table(results: &[RankedResult], ground_truth: &HashMap<String, String>) -> Result<RecallTable> {
    let r = recall_at_k(results, ground_truth, &[1, 5, 10])?;
    Ok(RecallTable::from_recalls(r[0], r[1], r[2]))
}

/// Every caption of every image is a query whose ground truth is its image.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub ids: Vec<String>,
    pub texts: Vec<String>,
    pub ground_truth: HashMap<String, String>,
}

impl QuerySet {
    pub fn from_captions<'a, I>(images: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a [String])>,
    {
        let mut out = QuerySet {
            ids: Vec::new(),
            texts: Vec::new(),
            ground_truth: HashMap::new(),
        };
        for (image, captions) in images {
            for (j, c) in captions.iter().enumerate() {
                let qid = format!("{image}#{j}");
                out.ground_truth.insert(qid.clone(), image.to_string());
                out.ids.push(qid);
                out.texts.push(c.clone());
            }
        }
        out
    }

    pub fn from_manifest(manifest: &DatasetManifest, split: Split) -> Self {
        let records: Vec<_> = manifest.split(split).map(|r| (r.id(), r.captions.clone())).collect();
        Self::from_captions(records.iter().map(|(id, c)| (id.as_str(), c.as_slice())))
    }
}

/// Ranks every query row against the index and scores recall@{1,5,10}.
pub fn evaluate_queries(index: &RetrievalIndex, queries: &QuerySet, query_rows: &Array2<f32>) -> Result<RecallTable> {
    let k = 10.min(index.len().max(1));
    let results = queries
        .ids
        .iter()
        .zip(query_rows.rows())
        .map(|(qid, row)| search(index, qid, row, k))
        .collect::<Result<Vec<_>>>()?;
    recall_table(&results, &queries.ground_truth)
}

/// Image-to-text recall: each image row queries all caption rows, and a hit
/// is any caption of that image within the first `k`.
pub fn image_to_text_recall(
    image_rows: &Array2<f32>,
    caption_rows: &Array2<f32>,
    caption_owner: &[usize],
) -> Result<RecallTable> {
    if caption_rows.nrows() != caption_owner.len() || image_rows.nrows() == 0 {
        return Err(Error::Shape("caption rows and owners differ, or no images".into()));
    }
    let unit = |a: &Array2<f32>| {
        let mut a = a.clone();
        for mut r in a.rows_mut() {
            normalize_in_place(r.as_slice_mut().expect("standard layout"));
        }
        a
    };
    let scores = unit(image_rows).dot(&unit(caption_rows).t());
    let caption_ids: Vec<String> = (0..caption_rows.nrows()).map(|j| format!("{j:08}")).collect();
    let mut hits = [0usize; 3];
    for (i, row) in scores.rows().into_iter().enumerate() {
        let order = top_k(row.as_slice().expect("standard layout"), &caption_ids, 10);
        let first = order.iter().position(|&j| caption_owner[j] == i);
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            if first.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    let n = image_rows.nrows() as f64;
    let r = hits.map(|h| 100.0 * h as f64 / n);
    Ok(RecallTable::from_recalls(r[0], r[1], r[2]))
}

/// CLS embeddings for many images, encoded in small chunks.
pub fn encode_images_chunked(backbones: &BackboneBundle<f32>, images: &[ImageTensor]) -> Array2<f32> {
    let m = backbones.vision_cfg().embed_dim;
    let mut out = Array2::<f32>::zeros((images.len(), m));
    for (c, chunk) in images.chunks(ENCODE_CHUNK).enumerate() {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let rows = backbones.encode_images(&refs);
        out.slice_mut(ndarray::s![c * ENCODE_CHUNK..c * ENCODE_CHUNK + chunk.len(), ..])
            .assign(&rows);
    }
    out
}

/// Index over one split. Unreadable images are skipped with a warning and
/// counted in the second return value.
pub fn build_index(
    backbones: &BackboneBundle<f32>,
    bridge: &Bridge<f32>,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<(RetrievalIndex, usize)> {
    let mut ids = Vec::new();
    let mut uris = Vec::new();
    let mut images = Vec::new();
    let mut skipped = 0;
    for record in manifest.split(split) {
        let path = manifest.image_path(record);
        match load_and_preprocess_image(&path) {
            Ok(img) => {
                ids.push(record.id());
                uris.push(record.image_uri.clone());
                images.push(img);
            }
            Err(e) => {
                tracing::warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no readable images in the {split} split"
        )));
    }
    let v = encode_images_chunked(backbones, &images);
    let projected = v.dot(&bridge.w_i);
    Ok((RetrievalIndex::from_embeddings(ids, uris, projected)?, skipped))
}

/// Projected RET-state rows `h^T W_t` for caption sequences that end in RET.
pub fn project_captions(
    backbones: &BackboneBundle<f32>,
    bridge: &Bridge<f32>,
    seqs: &[TokenSequence],
) -> Result<Array2<f32>> {
    let decoder = &backbones.decoder;
    let ret = decoder.ret_id();
    if let Some(bad) = seqs.iter().position(|s| s.ids.last() != Some(&ret)) {
        return Err(Error::InvalidArgument(format!(
            "query sequence {bad} does not end with RET"
        )));
    }
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
    let empty = Array2::zeros((0, decoder.cfg.embed_dim));
    let mut h = Array2::<f32>::zeros((seqs.len(), decoder.cfg.hidden_dim));
    // bounded chunks keep the packed activations small
    for (c, chunk) in refs.chunks(64).enumerate() {
        let pass = decoder.run(chunk, &empty, bridge.ret(), false)?;
        for (i, seg) in pass.segments.iter().enumerate() {
            h.row_mut(c * 64 + i).assign(&pass.hidden.row(seg.end - 1));
        }
    }
    Ok(h.dot(&bridge.w_t))
}

/// Unit query vector for free text.
pub fn embed_query(
    backbones: &BackboneBundle<f32>,
    bridge: &Bridge<f32>,
    vocab: &Vocabulary,
    text: &str,
) -> Result<Array1<f32>> {
    if text.trim().is_empty() {
        return Err(Error::InvalidArgument("query text is empty".into()));
    }
    let tokens = vocab.tokenize(text, true);
    tokens.validate(vocab.len(), backbones.decoder_cfg().context_len)?;
    let mut u = project_captions(backbones, bridge, &[tokens])?.row(0).to_owned();
    normalize_in_place(u.as_slice_mut().expect("owned vector"));
    Ok(u)
}

/// Text-to-image recall on one split of a manifest.
pub fn evaluate_split(
    backbones: &BackboneBundle<f32>,
    bridge: &Bridge<f32>,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<RecallTable> {
    let (index, _) = build_index(backbones, bridge, manifest, split)?;
    let queries = QuerySet::from_manifest(manifest, split);
    let seqs: Vec<TokenSequence> = queries.texts.iter().map(|t| vocab.tokenize(t, true)).collect();
    let rows = project_captions(backbones, bridge, &seqs)?;
    evaluate_queries(&index, &queries, &rows)
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:03}")).collect()
    }

    fn result(query: &str, ranked: &[&str]) -> RankedResult {
        RankedResult {
            query: query.into(),
            items: ranked
                .iter()
                .map(|id| RankedItem {
                    id: id.to_string(),
                    score: 0.0,
                })
                .collect(),
            truncated: false,
        }
    }

    #[test]
    fn self_retrieval_and_tie_rule() {
        let v = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.6, 0.8]];
        let index = RetrievalIndex::from_embeddings(ids(4), ids(4), v).unwrap();
        let r = search(&index, "q", array![0.0f32, 3.0].view(), 1).unwrap();
        assert_eq!(r.items[0].id, "img001");
        assert!((r.items[0].score - 1.0).abs() < 1e-6);
        let r = search(&index, "q", array![2.0f32, 0.0].view(), 3).unwrap();
        let got: Vec<&str> = r.items.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(got, ["img000", "img002", "img003"]);
        let r = search(&index, "q", array![1.0f32, 0.0].view(), 10).unwrap();
        assert_eq!(r.items.len(), 4);
        assert!(r.truncated);
        assert!(search(&index, "q", array![1.0f32, 0.0].view(), 0).is_err());
    }

    #[test]
    fn index_rows_are_unit_and_ids_unique() {
        let v = array![[3.0, 4.0], [0.0, 0.0]];
        let index = RetrievalIndex::from_embeddings(ids(2), ids(2), v.clone()).unwrap();
        assert!((index.vectors().row(0).dot(&index.vectors().row(0)) - 1.0).abs() < 1e-6);
        assert_eq!(index.vectors().row(1).sum(), 0.0);
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(RetrievalIndex::from_embeddings(dup.clone(), dup, v).is_err());
    }

    #[test]
    fn recall_cases() {
        let gt: HashMap<String, String> = [("q0", "a"), ("q1", "b")]
            .into_iter()
            .map(|(q, i)| (q.to_string(), i.to_string()))
            .collect();
        let perfect = [result("q0", &["a", "b"]), result("q1", &["b", "a"])];
        let t = recall_table(&perfect, &gt).unwrap();
        assert_eq!((t.r1, t.r5, t.r10, t.mean), (100.0, 100.0, 100.0, 100.0));
        assert!(recall_table(&[result("zz", &["a"])], &gt).is_err());
    }

    #[test]
    fn seven_query_fixture() {
        // ground truth sits at ranks 1, 2, 6, 11 (absent), 1, 5, 10
        let order: Vec<String> = (0..12).map(|i| format!("i{i:02}")).collect();
        let place = |truth_rank: Option<usize>, q: usize| {
            let mut items: Vec<String> = order.iter().filter(|id| **id != format!("t{q}")).cloned().collect();
            if let Some(r) = truth_rank {
                items.insert(r - 1, format!("t{q}"));
            }
            items.truncate(10);
            RankedResult {
                query: format!("q{q}"),
                items: items.into_iter().map(|id| RankedItem { id, score: 0.0 }).collect(),
                truncated: false,
            }
        };
        let ranks = [Some(1), Some(2), Some(6), None, Some(1), Some(5), Some(10)];
        let results: Vec<RankedResult> = ranks.iter().enumerate().map(|(q, &r)| place(r, q)).collect();
        let gt: HashMap<String, String> = (0..7).map(|q| (format!("q{q}"), format!("t{q}"))).collect();
        let t = recall_table(&results, &gt).unwrap();
        assert_eq!(t.r1, 100.0 * 2.0 / 7.0);
        assert_eq!(t.r5, 100.0 * 4.0 / 7.0);
        assert_eq!(t.r10, 100.0 * 6.0 / 7.0);
    }

    #[test]
    fn mean_of_ten_thirty_fifty() {
        assert_eq!(RecallTable::from_recalls(10.0, 30.0, 50.0).mean, 30.0);
    }

    #[test]
    fn image_to_text_counts_any_caption() {
        let images = array![[1.0f32, 0.0], [0.0, 1.0]];
        let captions = array![[1.0f32, 0.1], [0.1, 1.0], [0.9, 0.0]];
        let t = image_to_text_recall(&images, &captions, &[0, 1, 0]).unwrap();
        assert_eq!(t.r1, 100.0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let index = RetrievalIndex::from_embeddings(ids(2), ids(2), array![[1.0, 2.0], [3.0, -1.0]]).unwrap();
        index.save(dir.path()).unwrap();
        assert_eq!(RetrievalIndex::load(dir.path()).unwrap(), index);
        let missing = RetrievalIndex::load(&dir.path().join("nope")).unwrap_err();
        assert!(missing.to_string().contains("index not found"));
    }

    proptest! {
        #[test]
        fn search_is_a_total_order_consistent_with_scores(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..40),
            q in proptest::collection::vec(-1.0f32..1.0, 3),
            scale in 0.01f32..100.0,
        ) {
            let n = rows.len();
            let flat: Vec<f32> = rows.into_iter().flatten().collect();
            let index = RetrievalIndex::from_embeddings(ids(n), ids(n), Array2::from_shape_vec((n, 3), flat).unwrap()).unwrap();
            let qa = Array1::from(q);
            let a = search(&index, "q", qa.view(), n).unwrap();
            let b = search(&index, "q", (&qa * scale).view(), n).unwrap();
            let order_a: Vec<&str> = a.items.iter().map(|i| i.id.as_str()).collect();
            let order_b: Vec<&str> = b.items.iter().map(|i| i.id.as_str()).collect();
            prop_assert_eq!(order_a, order_b);
            for w in a.items.windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id));
                prop_assert!((-1.0..=1.0).contains(&w[0].score));
            }
        }
    }
}
