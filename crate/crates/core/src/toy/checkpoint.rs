//! Checkpoint container: the magic bytes, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f32`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::LayerWeights;
use super::{ToyModel, ToyModelConfig, Weights};
use crate::output::SCHEMA_VERSION;
use crate::rope::PositionMap;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ROPELAB1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    config: ToyModelConfig,
    position_map: PositionMap,
    context_window: usize,
    tensors: Vec<TensorEntry>,
    /// Free-form provenance supplied by the caller.
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    offset: usize,
}

pub fn save_checkpoint(path: &Path, model: &ToyModel, metadata: &serde_json::Value) -> Result<()> {
    let tensors = model.weights().named_tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
        for x in *data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        schema_version: SCHEMA_VERSION,
        config: model.config().clone(),
        position_map: *model.position_map(),
        context_window: model.context_window(),
        tensors: entries,
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec_pretty(&header)?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, returning the model and the stored metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ToyModel, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| bad(&format!("invalid header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(bad(&format!("unsupported schema version {}", header.schema_version)));
    }
    let payload = &bytes[payload_start..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut tensors: HashMap<&str, &TensorEntry> = HashMap::new();
    for entry in &header.tensors {
        if tensors.insert(&entry.name, entry).is_some() {
            return Err(bad(&format!("duplicate tensor {}", entry.name)));
        }
    }
    let fetch = |name: &str| -> Result<(&[usize], Vec<f32>)> {
        let entry = tensors
            .get(name)
            .ok_or_else(|| bad(&format!("missing tensor {name}")))?;
        let len: usize = entry.shape.iter().product();
        let data = entry
            .offset
            .checked_add(len)
            .and_then(|end| values.get(entry.offset..end))
            .ok_or_else(|| bad(&format!("tensor {name} runs past the payload")))?;
        Ok((&entry.shape, data.to_vec()))
    };
    let matrix = |name: &str| -> Result<Array2<f32>> {
        match fetch(name)? {
            (&[r, c], data) => Ok(Array2::from_shape_vec((r, c), data).expect("length checked")),
            _ => Err(bad(&format!("tensor {name} is not a matrix"))),
        }
    };
    let vector = |name: &str| -> Result<Array1<f32>> {
        match fetch(name)? {
            (&[_], data) => Ok(Array1::from(data)),
            _ => Err(bad(&format!("tensor {name} is not a vector"))),
        }
    };
    let mut layers = Vec::with_capacity(header.config.n_layers);
    for i in 0..header.config.n_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        layers.push(LayerWeights {
            attn_norm: vector(&p("attn_norm"))?,
            wq: matrix(&p("wq"))?,
            wk: matrix(&p("wk"))?,
            wv: matrix(&p("wv"))?,
            wo: matrix(&p("wo"))?,
            mlp_norm: vector(&p("mlp_norm"))?,
            w_in: matrix(&p("w_in"))?,
            w_out: matrix(&p("w_out"))?,
        });
    }
    if tensors.len() != 3 + 8 * header.config.n_layers {
        return Err(bad("unexpected extra tensors"));
    }
    let weights = Weights {
        embed: matrix("embed")?,
        layers,
        final_norm: vector("final_norm")?,
        head: matrix("head")?,
    };
    let map = PositionMap::new(
        header.position_map.trained_window(),
        header.position_map.extended_window(),
    )?;
    let model = ToyModel::from_parts(header.config, weights, Some(map), Some(header.context_window))?;
    Ok((model, header.metadata))
}
