//! `XMK1` checkpoints: magic, little-endian `u32` metadata length, JSON
//! metadata, then every parameter array as little-endian `f32` in layer
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::nn::{LayerSpec, ModelGraph, ModelKind, NamedParam, OutputKind};
use crate::tensor::{Precision, Tensor};

const MAGIC: &[u8; 4] = b"XMK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub kind: ModelKind,
    pub float_mode: Precision,
    pub input_shape: Vec<usize>,
    pub output: OutputKind,
    pub layer_count: usize,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamMeta>,
}

/// Serializes a model. Parameters are stored as `f32`, so an `F64` model
/// loses precision while an `F32` model round-trips bitwise.
pub fn write_checkpoint(model: &ModelGraph) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        kind: model.kind(),
        float_mode: model.precision(),
        input_shape: model.input_shape().to_vec(),
        output: model.output(),
        layer_count: model.layers().len(),
        layers: model.layers().to_vec(),
        params: model
            .params()
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelGraph> {
    const CTX: &str = "checkpoint";
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            context: "checkpoint header".into(),
            expected: 8,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(CTX, format!("bad magic {:?}", &bytes[..4])));
    }
    let meta_len = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let meta_end = 8 + meta_len;
    if bytes.len() < meta_end {
        return Err(Error::Truncated {
            context: "checkpoint metadata".into(),
            expected: meta_end,
            actual: bytes.len(),
        });
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[8..meta_end])?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(format_err(
            CTX,
            format!("version {} is not supported (expected {CHECKPOINT_VERSION})", meta.version),
        ));
    }
    if meta.layer_count != meta.layers.len() {
        return Err(format_err(
            CTX,
            format!("metadata declares {} layers but lists {}", meta.layer_count, meta.layers.len()),
        ));
    }
    let values: usize = meta.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let expected = meta_end + 4 * values;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            context: "checkpoint parameters".into(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(format_err(
            CTX,
            format!("{} bytes of parameters beyond the {} declared arrays", bytes.len() - expected, meta.params.len()),
        ));
    }
    let mut cursor = meta_end;
    let mut params = Vec::with_capacity(meta.params.len());
    for p in &meta.params {
        let count: usize = p.shape.iter().product();
        let data = bytes[cursor..cursor + 4 * count]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
            .collect();
        cursor += 4 * count;
        params.push(NamedParam {
            name: p.name.clone(),
            tensor: Tensor::new(p.shape.clone(), data)?,
        });
    }
    ModelGraph::new(meta.kind, meta.layers, params, meta.input_shape, meta.output, meta.float_mode)
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    read_checkpoint(&std::fs::read(path)?)
}
