use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One image and its reference captions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCaptionRecord {
    /// Path of the image relative to the manifest's base directory.
    #[serde(rename = "image")]
    pub image_uri: String,
    pub split: Split,
    pub captions: Vec<String>,
    /// Name of the dataset this record came from; set by [`merge_datasets`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl ImageCaptionRecord {
    /// Stable identifier: the image path without extension, separators flattened.
    pub fn id(&self) -> String {
        let stem = Path::new(&self.image_uri).with_extension("");
        stem.to_string_lossy().trim_start_matches('/').replace(['/', '\\'], "_")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub base_dir: PathBuf,
    pub records: Vec<ImageCaptionRecord>,
}

impl DatasetManifest {
    pub fn caption_count(&self) -> usize {
        self.records.iter().map(|r| r.captions.len()).sum()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageCaptionRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn image_path(&self, record: &ImageCaptionRecord) -> PathBuf {
        self.base_dir.join(&record.image_uri)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Deserialize)]
struct RawManifest {
    name: String,
    #[serde(default)]
    base_dir: Option<String>,
    #[serde(default)]
    num_images: Option<usize>,
    records: Vec<serde_json::Value>,
}

/// Reads a manifest, resolving `base_dir` against the manifest's own directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let manifest_dir = path.parent().unwrap_or(Path::new("."));
    let base_dir = match raw.base_dir.as_deref() {
        None | Some("") => manifest_dir.to_path_buf(),
        Some(b) => manifest_dir.join(b),
    };

    let mut records = Vec::with_capacity(raw.records.len());
    let mut seen = HashSet::new();
    for (index, value) in raw.records.into_iter().enumerate() {
        let record = parse_record(index, value)?;
        if !seen.insert(record.image_uri.clone()) {
            return Err(Error::Record {
                index,
                message: format!("image {} listed twice", record.image_uri),
            });
        }
        let resolved = base_dir.join(&record.image_uri);
        if !resolved.is_file() {
            return Err(Error::DanglingImage(resolved));
        }
        records.push(record);
    }
    if let Some(declared) = raw.num_images {
        if declared != records.len() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!("declares {declared} images but lists {}", records.len()),
            });
        }
    }
    Ok(DatasetManifest {
        name: raw.name,
        base_dir,
        records,
    })
}

fn parse_record(index: usize, value: serde_json::Value) -> Result<ImageCaptionRecord> {
    let bad = |message: String| Error::Record { index, message };
    let obj = value.as_object().ok_or_else(|| bad("record is not an object".into()))?;
    let image = obj
        .get("image")
        .and_then(|v| v.as_str())
        .ok_or_else(|| bad("missing string field \"image\"".into()))?;
    let split = obj
        .get("split")
        .and_then(|v| v.as_str())
        .ok_or_else(|| bad("missing string field \"split\"".into()))?
        .parse::<Split>()
        .map_err(bad)?;
    let captions = obj
        .get("captions")
        .and_then(|v| v.as_array())
        .ok_or_else(|| bad("missing array field \"captions\"".into()))?
        .iter()
        .map(|c| c.as_str().map(str::to_owned))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("captions must be strings".into()))?;
    if captions.is_empty() {
        return Err(bad("captions list is empty".into()));
    }
    let source = obj.get("source").and_then(|v| v.as_str()).map(str::to_owned);
    Ok(ImageCaptionRecord {
        image_uri: image.to_owned(),
        split,
        captions,
        source,
    })
}

/// Concatenates manifests without deduplicating captions.
///
/// Each record is tagged with the name of the manifest it came from (records
/// that already carry a source keep it, which makes merging associative).
/// When the inputs disagree on `base_dir`, image paths are rewritten to
/// include their original base directory.
pub fn merge_datasets(manifests: &[DatasetManifest], name: &str) -> Result<DatasetManifest> {
    if manifests.is_empty() {
        return Err(Error::InvalidArgument("merge needs at least one manifest".into()));
    }
    let common_base = manifests
        .iter()
        .all(|m| m.base_dir == manifests[0].base_dir)
        .then(|| manifests[0].base_dir.clone());

    let mut keys: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut records = Vec::with_capacity(manifests.iter().map(|m| m.records.len()).sum());
    for m in manifests {
        for r in &m.records {
            let mut r = r.clone();
            let source = r.source.get_or_insert_with(|| m.name.clone()).clone();
            *keys.entry((source, r.image_uri.clone())).or_default() += 1;
            if common_base.is_none() {
                r.image_uri = m.base_dir.join(&r.image_uri).to_string_lossy().into_owned();
            }
            records.push(r);
        }
    }
    let collisions: Vec<String> = keys
        .into_iter()
        .filter(|(_, n)| *n > 1)
        .map(|((s, i), _)| format!("{s}:{i}"))
        .collect();
    if !collisions.is_empty() {
        return Err(Error::MergeCollision(collisions));
    }
    Ok(DatasetManifest {
        name: name.to_owned(),
        base_dir: common_base.unwrap_or_default(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(name: &str, n_images: usize, captions_per_image: usize) -> DatasetManifest {
        let records = (0..n_images)
            .map(|i| ImageCaptionRecord {
                image_uri: format!("img_{i:05}.png"),
                split: Split::Train,
                captions: vec!["a caption".to_owned(); captions_per_image],
                source: None,
            })
            .collect();
        DatasetManifest {
            name: name.to_owned(),
            base_dir: PathBuf::from(format!("/data/{name}")),
            records,
        }
    }

    fn write_fixture(dir: &Path, records: serde_json::Value) -> PathBuf {
        let path = dir.join("manifest.json");
        let doc = serde_json::json!({"name": "fixture", "base_dir": "", "records": records});
        std::fs::write(&path, doc.to_string()).unwrap();
        path
    }

    #[test]
    fn empty_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), serde_json::json!([]));
        let m = load_manifest(&path).unwrap();
        assert!(m.records.is_empty());
    }

    #[test]
    fn fixture_counts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = Vec::new();
        for (i, split) in ["train", "val", "test"].iter().enumerate() {
            let name = format!("{i}.png");
            std::fs::write(dir.path().join(&name), b"x").unwrap();
            recs.push(serde_json::json!({
                "image": name, "split": split,
                "captions": ["one", "two", "three", "four", "five"]
            }));
        }
        let m = load_manifest(&write_fixture(dir.path(), serde_json::Value::Array(recs))).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.caption_count(), 15);
        let splits: Vec<_> = m.records.iter().map(|r| r.split).collect();
        assert_eq!(splits, vec![Split::Train, Split::Val, Split::Test]);
    }

    #[test]
    fn bad_split_reports_index() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"x").unwrap();
        let recs = serde_json::json!([
            {"image": "a.png", "split": "train", "captions": ["x"]},
            {"image": "a.png", "split": "trian", "captions": ["x"]},
        ]);
        match load_manifest(&write_fixture(dir.path(), recs)) {
            Err(Error::Record { index, message }) => {
                assert_eq!(index, 1);
                assert!(message.contains("trian"));
            }
            other => panic!("expected record error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_image_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let recs = serde_json::json!([{"image": "missing.png", "split": "test", "captions": ["x"]}]);
        match load_manifest(&write_fixture(dir.path(), recs)) {
            Err(Error::DanglingImage(p)) => assert!(p.ends_with("missing.png")),
            other => panic!("expected dangling image, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn merge_single_is_identity_with_new_name() {
        let a = synthetic("a", 4, 5);
        let m = merge_datasets(std::slice::from_ref(&a), "renamed").unwrap();
        assert_eq!(m.name, "renamed");
        assert_eq!(m.base_dir, a.base_dir);
        assert_eq!(m.records.len(), 4);
        for (x, y) in m.records.iter().zip(&a.records) {
            assert_eq!(x.image_uri, y.image_uri);
            assert_eq!(x.captions, y.captions);
            assert_eq!(x.source.as_deref(), Some("a"));
        }
    }

    #[test]
    fn merge_is_additive() {
        let m = merge_datasets(&[synthetic("a", 8, 5), synthetic("b", 8, 5)], "ab").unwrap();
        assert_eq!(m.records.len(), 16);
        assert_eq!(m.caption_count(), 80);
    }

    #[test]
    fn merge_detects_collisions() {
        let a = synthetic("a", 2, 1);
        match merge_datasets(&[a.clone(), a], "aa") {
            Err(Error::MergeCollision(c)) => assert_eq!(c.len(), 2),
            other => panic!("expected collision, got {other:?}"),
        }
    }

    #[test]
    fn merge_is_associative_up_to_order() {
        let (a, b, c) = (synthetic("a", 3, 2), synthetic("b", 2, 3), synthetic("c", 4, 1));
        let left = merge_datasets(
            &[merge_datasets(&[a.clone(), b.clone()], "ab").unwrap(), c.clone()],
            "x",
        )
        .unwrap();
        let right = merge_datasets(&[a, merge_datasets(&[b, c], "bc").unwrap()], "x").unwrap();
        let key = |m: &DatasetManifest| {
            let mut v: Vec<_> = m
                .records
                .iter()
                .map(|r| (r.source.clone(), r.image_uri.clone(), r.captions.clone()))
                .collect();
            v.sort();
            v
        };
        assert_eq!(key(&left), key(&right));
    }
}
