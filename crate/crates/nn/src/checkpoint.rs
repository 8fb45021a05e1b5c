//! Parameter files: a JSON manifest plus a flat little-endian `f32` blob.
//!
//! `<stem>.json` lists every tensor with its shape and byte offset into
//! `<stem>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT: &str = "flowgen-params/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn save_params(params: &ParamSet<f32>, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest_path, blob_path) = paths(dir, stem);
    let mut blob = Vec::with_capacity(params.num_elements() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            len: t.numel(),
        });
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f32le".into(),
        blob: format!("{stem}.bin"),
        tensors,
    };
    fs::write(&blob_path, &blob)?;
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_params(dir: &Path, stem: &str) -> Result<ParamSet<f32>> {
    let (manifest_path, _) = paths(dir, stem);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != FORMAT || manifest.dtype != "f32le" {
        return Err(NnError::Format(format!(
            "unsupported format {} / {}",
            manifest.format, manifest.dtype
        )));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let end = e.offset + e.len * 4;
        if end > blob.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(NnError::Format(format!("tensor `{}` out of bounds", e.name)));
        }
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::<f32>::new();
        p.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap())
            .unwrap();
        p.insert("a.bias", Tensor::row(vec![f32::MIN_POSITIVE, 42.0])).unwrap();
        save_params(&p, dir.path(), "model").unwrap();
        let q = load_params(dir.path(), "model").unwrap();
        assert_eq!(p, q);

        let manifest: Manifest =
            serde_json::from_slice(&fs::read(dir.path().join("model.json")).unwrap()).unwrap();
        assert_eq!(manifest.tensors[1].offset, 24);
        assert_eq!(fs::read(dir.path().join("model.bin")).unwrap().len(), 32);
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::<f32>::new();
        p.insert("x", Tensor::row(vec![1.0, 2.0])).unwrap();
        save_params(&p, dir.path(), "m").unwrap();
        fs::write(dir.path().join("m.bin"), [0u8; 4]).unwrap();
        assert!(matches!(load_params(dir.path(), "m"), Err(NnError::Format(_))));
    }
}
