use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into `weights.bin`.
    pub offset: usize,
    pub trainable: bool,
}

/// `manifest.json` of a checkpoint directory; weights live next to it in
/// `weights.bin` as little-endian values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub tensors: Vec<CheckpointEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io { path: path.to_path_buf(), source }
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, store: &ParamStore<T>, meta: serde_json::Value) -> Result<(), TensorError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut bytes = Vec::with_capacity(store.count() * T::BYTES);
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for p in store.iter() {
        tensors.push(CheckpointEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset, trainable: p.trainable });
        offset += p.value.numel();
        p.value.data().iter().for_each(|v| v.write_le(&mut bytes));
    }
    let manifest = CheckpointManifest { dtype: T::DTYPE.to_string(), tensors, meta };
    let weights = dir.join("weights.bin");
    fs::write(&weights, &bytes).map_err(io(&weights))?;
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    fs::write(&mpath, json).map_err(io(&mpath))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ParamStore<T>, CheckpointManifest), TensorError> {
    let mpath = dir.join("manifest.json");
    let raw = fs::read(&mpath).map_err(io(&mpath))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&raw).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.dtype != T::DTYPE {
        return Err(TensorError::Checkpoint(format!("stored dtype {} but {} requested", manifest.dtype, T::DTYPE)));
    }
    let wpath = dir.join("weights.bin");
    let bytes = fs::read(&wpath).map_err(io(&wpath))?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let (lo, hi) = (e.offset * T::BYTES, (e.offset + n) * T::BYTES);
        if hi > bytes.len() {
            return Err(TensorError::Checkpoint(format!("{} extends past end of weights.bin", e.name)));
        }
        let data = bytes[lo..hi].chunks_exact(T::BYTES).map(T::read_le).collect();
        let id = store.insert(&e.name, Tensor::new(e.shape.clone(), data)?);
        store.get_mut(id).trainable = e.trainable;
    }
    Ok((store, manifest))
}
