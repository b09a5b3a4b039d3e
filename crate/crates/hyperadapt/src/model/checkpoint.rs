use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Scalar, Tensor2};

use super::{ModelError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// One tensor's location inside the companion blob. `offset` and `length`
/// are in elements, not bytes; values are little-endian, row-major.
/// `shape` is `[n]` for vector parameters and `[rows, cols]` for matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest<C> {
    format_version: u32,
    config: C,
    tensors: Vec<TensorEntry>,
}

/// Writes `store` as a JSON manifest plus binary blob. Tensors appear in
/// the store's insertion order with contiguous offsets, so the same store
/// always produces byte-identical files.
pub fn save_checkpoint<T: Scalar, C: Serialize>(
    manifest_path: &Path,
    blob_path: &Path,
    config: &C,
    store: &ParamStore<T>,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(store.total_params() * T::BYTES);
    let mut offset = 0usize;
    for (name, p) in store.iter() {
        let (rows, cols) = p.value.shape();
        let shape = if p.vector { vec![cols] } else { vec![rows, cols] };
        let length = p.value.len();
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            dtype: T::DTYPE.to_string(),
            offset,
            length,
        });
        for &v in p.value.data() {
            v.write_le(&mut blob);
        }
        offset += length;
    }
    let manifest = Manifest { format_version: FORMAT_VERSION, config, tensors };
    let mut body = serde_json::to_string_pretty(&manifest)?;
    body.push('\n');
    std::fs::write(manifest_path, body)?;
    std::fs::write(blob_path, blob)?;
    Ok(())
}

/// Reads a manifest + blob pair back into a store. The stored dtype must
/// match `T` exactly; checkpoints never convert precision implicitly.
pub fn load_checkpoint<T: Scalar, C: DeserializeOwned>(
    manifest_path: &Path,
    blob_path: &Path,
) -> Result<(C, ParamStore<T>)> {
    let manifest: Manifest<C> = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "format_version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let blob = std::fs::read(blob_path)?;
    if blob.len() % T::BYTES != 0 {
        return Err(ModelError::Checkpoint(format!(
            "blob size {} is not a multiple of the {}-byte element width",
            blob.len(),
            T::BYTES
        )));
    }
    let total_elems = blob.len() / T::BYTES;
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        if entry.dtype != T::DTYPE {
            return Err(ModelError::Checkpoint(format!(
                "tensor {:?} has dtype {} but this run uses {}",
                entry.name,
                entry.dtype,
                T::DTYPE
            )));
        }
        let (rows, cols, vector) = match entry.shape.as_slice() {
            [n] => (1, *n, true),
            [r, c] => (*r, *c, false),
            other => {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {:?} has unsupported rank-{} shape",
                    entry.name,
                    other.len()
                )))
            }
        };
        if rows * cols != entry.length {
            return Err(ModelError::Checkpoint(format!(
                "tensor {:?}: shape {:?} does not cover length {}",
                entry.name, entry.shape, entry.length
            )));
        }
        let end = entry.offset.checked_add(entry.length).filter(|&e| e <= total_elems);
        let Some(_) = end else {
            return Err(ModelError::Checkpoint(format!(
                "tensor {:?}: offset {} + length {} exceeds blob ({} elements)",
                entry.name, entry.offset, entry.length, total_elems
            )));
        };
        let mut data = Vec::with_capacity(entry.length);
        for i in 0..entry.length {
            let at = (entry.offset + i) * T::BYTES;
            data.push(T::read_le(&blob[at..at + T::BYTES]));
        }
        let tensor = Tensor2::from_vec(rows, cols, data)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if vector {
            store.insert_vector(&entry.name, tensor)?;
        } else {
            store.insert_matrix(&entry.name, tensor)?;
        }
    }
    Ok((manifest.config, store))
}
