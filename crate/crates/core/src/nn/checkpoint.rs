//! Directory checkpoints: `manifest.json` describing every tensor plus a
//! single `params.bin` blob of little-endian f32 values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// A loaded checkpoint: parameters, free-form metadata and the blob digest.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub meta: serde_json::Value,
    pub sha256: String,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

/// Writes `dir/manifest.json` and `dir/params.bin`, replacing an existing
/// checkpoint only once the new one is complete. Returns the blob digest.
pub fn save_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
    params: &ParamStore<T>,
    meta: serde_json::Value,
) -> Result<String> {
    let dir = dir.as_ref();
    let mut blob = Vec::with_capacity(params.num_values() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: "pbdrnet-checkpoint".into(),
        version: 1,
        blob: BLOB_FILE.into(),
        tensors,
        meta,
    };
    let tmp: PathBuf = {
        let mut s = dir.as_os_str().to_owned();
        s.push(".partial");
        s.into()
    };
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join(BLOB_FILE), &blob)?;
    fs::write(tmp.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(hex::encode(Sha256::digest(&blob)))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| ckpt_err(dir, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != "pbdrnet-checkpoint" {
        return Err(ckpt_err(dir, format!("unknown format '{}'", manifest.format)));
    }
    let blob = fs::read(dir.join(&manifest.blob))
        .map_err(|e| ckpt_err(dir, format!("cannot read blob: {e}")))?;
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(ckpt_err(dir, format!("tensor '{}' has unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset as usize, e.offset as usize + e.nbytes as usize);
        if e.nbytes as usize != n * 4 || end > blob.len() {
            return Err(ckpt_err(dir, format!("tensor '{}' extent is inconsistent", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(Checkpoint { params, meta: manifest.meta, sha256: hex::encode(Sha256::digest(&blob)) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::<f32>::new();
        p.init_uniform("a.w", &[3, 4, 5], 7, &mut rng);
        p.init_const("a.b", &[5], 0.1);
        p.insert("z", Tensor::new([2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let h1 = save_checkpoint(&path, &p, serde_json::json!({"k": 1})).unwrap();
        let c = load_checkpoint(&path).unwrap();
        assert_eq!(c.sha256, h1);
        assert_eq!(c.meta["k"], 1);
        for (name, t) in p.iter() {
            let u = c.params.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = u.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        // overwrite in place
        save_checkpoint(&path, &p, serde_json::json!({"k": 2})).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().meta["k"], 2);
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
