//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `TRSUMCK1`, a little-endian `u64` manifest
//! length, the JSON manifest, then raw little-endian `f32` tensor data at
//! the offsets the manifest lists (relative to the start of the data block).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Mat;
use super::{Model, ModelConfig, ModelError, ModelParams};
use crate::tokenizer::{TokenizerError, Vocabulary};

const MAGIC: &[u8; 8] = b"TRSUMCK1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] TokenizerError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    vocab: Vocabulary,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

pub fn save(path: impl AsRef<Path>, model: &Model<f32>, vocab: &Vocabulary) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    write_to(&mut bytes, model, vocab)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_to(mut w: impl Write, model: &Model<f32>, vocab: &Vocabulary) -> Result<(), CheckpointError> {
    let params = model.params();
    let mut offset = 0;
    let tensors = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                rows: t.rows,
                cols: t.cols,
                offset,
            };
            offset += t.len() * 4;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        config: model.config().clone(),
        vocab: vocab.clone(),
        dtype: "f32".into(),
        tensors,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for t in &params.tensors {
        for x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model<f32>, Vocabulary), CheckpointError> {
    read_from(std::fs::File::open(path)?)
}

pub fn read_from(mut r: impl Read) -> Result<(Model<f32>, Vocabulary), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| CheckpointError::Data("manifest length overflows".into()))?;
    let mut manifest = vec![0u8; len];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;
    if manifest.dtype != "f32" {
        return Err(CheckpointError::Data(format!("unsupported dtype {}", manifest.dtype)));
    }
    if manifest.vocab.len() != manifest.config.vocab_size {
        return Err(CheckpointError::Data("vocabulary size disagrees with config".into()));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;

    let mut params = ModelParams {
        names: Vec::new(),
        tensors: Vec::new(),
    };
    for e in &manifest.tensors {
        let n = e.rows * e.cols;
        let bytes = data
            .get(e.offset..e.offset + n * 4)
            .ok_or_else(|| CheckpointError::Data(format!("tensor {} runs past the end", e.name)))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.names.push(e.name.clone());
        params.tensors.push(Mat::from_vec(e.rows, e.cols, values));
    }
    let model = Model::from_params(manifest.config, params)?;
    Ok((model, manifest.vocab))
}
