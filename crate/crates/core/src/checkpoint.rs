//! Parameter checkpoints: a JSON manifest next to a flat little-endian
//! `f32` blob.
//!
//! `foo.ckpt` holds the blob and `foo.ckpt.json` the manifest. The manifest
//! lists every parameter's name, shape, byte offset and element count in
//! store order, plus an opaque `meta` object owned by the caller.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Real, Shape, Tensor};

pub const FORMAT: &str = "cycledepth-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn manifest_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Serializes `store` into `(manifest, blob)` without touching the disk.
pub fn encode<T: Real>(store: &ParamStore<T>, meta: serde_json::Value) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.numel() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        let offset = blob.len();
        for v in p.value.data() {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape().dims(),
            offset,
            len: p.shape().numel(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: "f32le".to_string(),
        blob_bytes: blob.len(),
        tensors,
        meta,
    };
    (manifest, blob)
}

/// Decodes every tensor in manifest order.
pub fn decode<T: Real>(manifest: &Manifest, blob: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    if manifest.format != FORMAT || manifest.version != VERSION || manifest.dtype != "f32le" {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{} ({})",
            manifest.format, manifest.version, manifest.dtype
        )));
    }
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let [n, c, h, w] = e.shape;
        let shape = Shape::new(n, c, h, w);
        let end = e.offset + e.len * 4;
        if shape.numel() != e.len || end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` ({shape}, {} values at byte {}) does not fit the blob",
                e.name, e.len, e.offset
            )));
        }
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        out.push((e.name.clone(), Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

pub fn save<T: Real>(store: &ParamStore<T>, meta: serde_json::Value, path: &Path) -> Result<()> {
    let (manifest, blob) = encode(store, meta);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((manifest, blob))
}

/// Overwrites the values of `store` from a decoded checkpoint. Names and
/// shapes must match one-to-one.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    let tensors = decode::<T>(manifest, blob)?;
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let p = store.get_mut(id);
        if p.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {} in the checkpoint but {} in the model",
                t.shape(),
                p.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_from(values: &[Vec<f32>]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            let t = Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v.clone()).unwrap();
            s.insert(format!("group/p{i}"), t).unwrap();
        }
        s
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            values in prop::collection::vec(
                prop::collection::vec(any::<u32>().prop_map(f32::from_bits), 1..20), 1..6)
        ) {
            let store = store_from(&values);
            let (m, blob) = encode(&store, serde_json::Value::Null);
            let back = decode::<f32>(&m, &blob).unwrap();
            for ((_, t), v) in back.iter().zip(&values) {
                let a: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn offsets_are_contiguous() {
        let store = store_from(&[vec![1.0; 3], vec![2.0; 5]]);
        let (m, blob) = encode(&store, serde_json::json!({"k": 1}));
        assert_eq!(m.tensors[0].offset, 0);
        assert_eq!(m.tensors[1].offset, 12);
        assert_eq!(blob.len(), 32);
        assert_eq!(m.blob_bytes, 32);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let store = store_from(&[vec![1.0; 3]]);
        let (m, blob) = encode(&store, serde_json::Value::Null);
        assert!(decode::<f32>(&m, &blob[..8]).is_err());
    }

    #[test]
    fn save_and_load_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let store = store_from(&[vec![0.1, -3.5, f32::MIN_POSITIVE]]);
        save(&store, serde_json::Value::Null, &path).unwrap();
        let (m, blob) = read(&path).unwrap();
        let mut other = store_from(&[vec![0.0; 3]]);
        load_into(&mut other, &m, &blob).unwrap();
        assert_eq!(other.get(other.id_of("group/p0").unwrap()).value.data(), &[0.1, -3.5, f32::MIN_POSITIVE]);
    }
}
