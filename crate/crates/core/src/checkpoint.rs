//! Directory container for named tensors: `manifest.json` plus `tensors.bin`.
//!
//! Every tensor is stored as little-endian raw data at a recorded byte offset
//! together with the SHA-256 of those bytes. Loading verifies every digest
//! before anything is handed back, so a corrupt container never yields a
//! partially restored state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbones::Params;
use crate::error::{Error, Result};
use crate::tensor::{sha256_hex, to_le_bytes, Scalar};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub train_state: Value,
    /// Configuration needed to rebuild the owning objects.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub meta: Value,
}

/// A fully verified container.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<T> {
    pub tensors: BTreeMap<String, Array2<T>>,
    pub train_state: Value,
    pub meta: Value,
}

impl<T: Scalar> Container<T> {
    pub fn take(&mut self, name: &str, path: &Path) -> Result<Array2<T>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::checkpoint(path, format!("missing tensor {name}")))
    }

    /// A copy of `template` with every tensor replaced from this container.
    /// Names are prefixed with `prefix`; shapes must match exactly.
    pub fn restore<P: Params<T> + Clone>(&self, template: &P, prefix: &str, path: &Path) -> Result<P> {
        let mut out = template.clone();
        let mut problem = None;
        out.visit_mut(prefix, &mut |name, a| {
            if problem.is_some() {
                return;
            }
            match self.tensors.get(&name) {
                Some(t) if t.dim() == a.dim() => a.assign(t),
                Some(t) => problem = Some(format!("tensor {name} has shape {:?}, expected {:?}", t.dim(), a.dim())),
                None => problem = Some(format!("missing tensor {name}")),
            }
        });
        match problem {
            Some(message) => Err(Error::checkpoint(path, message)),
            None => Ok(out),
        }
    }
}

pub fn write_container<T: Scalar>(
    dir: &Path,
    tensors: &[(String, &Array2<T>)],
    train_state: &Value,
    meta: &Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, a) in tensors {
        let bytes = to_le_bytes(*a);
        entries.push(TensorEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: data.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        data.extend_from_slice(&bytes);
    }
    let manifest = ContainerManifest {
        format_version: FORMAT_VERSION,
        tensors: entries,
        train_state: train_state.clone(),
        meta: meta.clone(),
    };
    let bin = dir.join(TENSORS_FILE);
    fs::write(&bin, &data).map_err(|e| Error::io(&bin, e))?;
    let man = dir.join(MANIFEST_FILE);
    fs::write(&man, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&man, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<ContainerManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ContainerManifest =
        serde_json::from_str(&text).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            &path,
            format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

pub fn read_container<T: Scalar>(dir: &Path) -> Result<Container<T>> {
    let manifest = read_manifest(dir)?;
    let bin = dir.join(TENSORS_FILE);
    let data = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != T::DTYPE {
            return Err(Error::checkpoint(
                &bin,
                format!("tensor {} has dtype {}, expected {}", entry.name, entry.dtype, T::DTYPE),
            ));
        }
        let [rows, cols] = entry.shape[..] else {
            return Err(Error::checkpoint(
                &bin,
                format!("tensor {} is not two-dimensional", entry.name),
            ));
        };
        let start = entry.offset as usize;
        let end = start + rows * cols * T::BYTES;
        let Some(bytes) = data.get(start..end) else {
            return Err(Error::checkpoint(
                &bin,
                format!(
                    "truncated: tensor {} needs bytes {start}..{end} of {}",
                    entry.name,
                    data.len()
                ),
            ));
        };
        if sha256_hex(bytes) != entry.sha256 {
            return Err(Error::checkpoint(
                &bin,
                format!("digest mismatch for tensor {}", entry.name),
            ));
        }
        let values: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        let a = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::checkpoint(&bin, e.to_string()))?;
        if tensors.insert(entry.name.clone(), a).is_some() {
            return Err(Error::checkpoint(&bin, format!("duplicate tensor {}", entry.name)));
        }
    }
    Ok(Container {
        tensors,
        train_state: manifest.train_state,
        meta: manifest.meta,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn sample(dir: &Path) {
        let a = array![[1.0f32, 2.0], [3.0, 4.0]];
        let b = array![[-0.5f32]];
        write_container(
            dir,
            &[("a".into(), &a), ("b".into(), &b)],
            &serde_json::json!({"step": 3}),
            &Value::Null,
        )
        .unwrap();
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        sample(dir.path());
        let c: Container<f32> = read_container(dir.path()).unwrap();
        assert_eq!(c.tensors["a"], array![[1.0f32, 2.0], [3.0, 4.0]]);
        assert_eq!(c.tensors["b"], array![[-0.5f32]]);
        assert_eq!(c.train_state["step"], 3);
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.tensors[1].offset, 16);
        assert_eq!(m.tensors[0].dtype, "f32");
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        sample(dir.path());
        let bin = dir.path().join(TENSORS_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 2]).unwrap();
        let err = read_container::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        sample(dir.path());
        let bin = dir.path().join(TENSORS_FILE);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, &bytes).unwrap();
        let err = read_container::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("digest mismatch"), "{err}");
    }

    #[test]
    fn version_and_dtype_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        sample(dir.path());
        assert!(read_container::<f64>(dir.path())
            .unwrap_err()
            .to_string()
            .contains("dtype"));
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&path, text).unwrap();
        assert!(read_container::<f32>(dir.path())
            .unwrap_err()
            .to_string()
            .contains("version"));
    }
}
