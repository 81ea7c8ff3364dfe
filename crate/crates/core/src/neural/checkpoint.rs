//! Binary checkpoints: magic, length-prefixed JSON header, raw f32 data.
//!
//! ```text
//! "NSAR1" | u64 LE header length | header JSON | f32 LE tensors in manifest order
//! ```
//! Tensor offsets in the header are byte offsets from the start of the data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use super::params::Params;
use super::NeuralError;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NSAR1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), NeuralError> {
    let tensors = model.params.tensors();
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for t in &tensors {
        entries.push(Entry { name: t.name.clone(), shape: t.shape.clone(), offset });
        offset += 4 * t.data.len() as u64;
    }
    let header = serde_json::to_vec(&Header { config: model.config.clone(), tensors: entries })
        .map_err(|e| NeuralError::CorruptCheckpoint(e.to_string()))?;

    let mut buf = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header.len() + offset as usize);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in &tensors {
        for x in t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> NeuralError {
    NeuralError::CorruptCheckpoint(msg.into())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, NeuralError> {
    let bytes = fs::read(path)?;
    let rest = bytes.strip_prefix(CHECKPOINT_MAGIC.as_slice()).ok_or_else(|| corrupt("bad magic"))?;
    if rest.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let (len_bytes, rest) = rest.split_at(8);
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
    if header_len > rest.len() as u64 {
        return Err(corrupt("truncated header"));
    }
    let (header, data) = rest.split_at(header_len as usize);
    let header: Header = serde_json::from_slice(header).map_err(|e| corrupt(format!("header: {e}")))?;
    header.config.validate().map_err(corrupt)?;

    let mut params: Params<f32> = Params::zeros(&header.config);
    let mut expected_bytes = 0usize;
    {
        let mut tensors = params.tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(corrupt(format!("expected {} tensors, found {}", tensors.len(), header.tensors.len())));
        }
        for (t, e) in tensors.iter_mut().zip(&header.tensors) {
            if t.name != e.name || t.shape != e.shape {
                return Err(corrupt(format!("tensor {} {:?} does not match {} {:?}", e.name, e.shape, t.name, t.shape)));
            }
            let start = e.offset as usize;
            let end = start + 4 * t.data.len();
            let src = data.get(start..end).ok_or_else(|| corrupt(format!("truncated data for {}", e.name)))?;
            for (x, chunk) in t.data.iter_mut().zip(src.chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            expected_bytes += 4 * t.data.len();
        }
    }
    if data.len() != expected_bytes {
        return Err(corrupt(format!("{} data bytes, expected {expected_bytes}", data.len())));
    }
    Ok(Model::new(header.config, params))
}
