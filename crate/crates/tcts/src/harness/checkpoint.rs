//! Checkpoint file format.
//!
//! Layout, in order:
//!   1. magic bytes `b"TCTSCKPT"`;
//!   2. header length as a little-endian u64;
//!   3. the JSON header (version, mode, dimensions, vocab/config hashes,
//!      and a tensor manifest of names and shapes);
//!   4. the payload: every tensor's data in manifest order, row-major,
//!      as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamMap, Tensor};
use crate::model::{ModelConfig, ModelParams};

use super::config::HarnessError;

const MAGIC: &[u8; 8] = b"TCTSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// "teacher" for attribute-bearing models, "student" otherwise.
    pub mode: String,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub uses_attributes: bool,
    /// Vocabulary min-count used when the training vocabulary was built;
    /// evaluation rebuilds the vocabulary with the same rule.
    pub min_count: usize,
    pub vocab_hash: String,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn save(
    params: &ModelParams,
    min_count: usize,
    vocab_hash: &str,
    config_hash: &str,
    path: &Path,
) -> Result<(), HarnessError> {
    let entries = params.entries();
    let header = CheckpointHeader {
        version: VERSION,
        mode: if params.cfg.uses_attributes {
            "teacher".into()
        } else {
            "student".into()
        },
        hidden_dim: params.cfg.hidden_dim,
        vocab_size: params.cfg.vocab_size,
        max_len: params.cfg.max_len,
        uses_attributes: params.cfg.uses_attributes,
        min_count,
        vocab_hash: vocab_hash.to_owned(),
        config_hash: config_hash.to_owned(),
        tensors: entries
            .iter()
            .map(|(name, t)| TensorEntry {
                name: (*name).to_owned(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| HarnessError::Numeric(format!("header serialization failed: {e}")))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    for (_, tensor) in entries {
        for x in tensor.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams, CheckpointHeader), HarnessError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(HarnessError::IncompatibleCheckpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    input.read_exact(&mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| HarnessError::IncompatibleCheckpoint(format!("bad header: {e}")))?;
    if header.version != VERSION {
        return Err(HarnessError::IncompatibleCheckpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }

    let mut map = ParamMap::new();
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        map.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
    }

    let cfg = ModelConfig {
        hidden_dim: header.hidden_dim,
        vocab_size: header.vocab_size,
        max_len: header.max_len,
        uses_attributes: header.uses_attributes,
    };
    let expected = ModelParams::zeros(cfg);
    for (name, tensor) in expected.entries() {
        match map.get(name) {
            Some(loaded) if loaded.shape() == tensor.shape() => {}
            Some(loaded) => {
                return Err(HarnessError::IncompatibleCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    tensor.shape()
                )))
            }
            None => {
                return Err(HarnessError::IncompatibleCheckpoint(format!(
                    "tensor {name} missing from checkpoint"
                )))
            }
        }
    }
    Ok((ModelParams::from_map(cfg, &map), header))
}
