//! CEGM checkpoint files.
//!
//! Layout: `"CEGM"`, `u32` LE version, `u32` LE header length, a JSON header
//! describing the architecture and the tensor order, then every tensor as
//! little-endian `f64` in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::graph::SimilarityConfig;
use crate::segmentation::SegmentationConfig;

use super::params::{AggregatorKind, ModelConfig, ModelParams, ReadoutKind, TensorSpec};

pub const CEGM_MAGIC: &[u8; 4] = b"CEGM";
pub const CEGM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    layer_dims: Vec<usize>,
    aggregator_kind: AggregatorKind,
    readout_kind: ReadoutKind,
    a_dim: usize,
    attention_divide_by_n: bool,
    similarity: SimilarityConfig,
    #[serde(default)]
    segmentation: SegmentationConfig,
    tensors: Vec<TensorSpec>,
}

/// A trained model together with the segmentation and graph construction it
/// was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub similarity: SimilarityConfig,
    pub segmentation: SegmentationConfig,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = &ckpt.params.config;
    let header = Header {
        layer_dims: cfg.layer_dims.clone(),
        aggregator_kind: cfg.aggregator_kind,
        readout_kind: cfg.readout_kind,
        a_dim: cfg.a_dim,
        attention_divide_by_n: cfg.attention_divide_by_n,
        similarity: ckpt.similarity.clone(),
        segmentation: ckpt.segmentation.clone(),
        tensors: ckpt.params.weights.layout(),
    };
    let json = serde_json::to_vec(&header)?;
    let flat = ckpt.params.weights.to_flat();
    let mut out = Vec::with_capacity(12 + json.len() + 8 * flat.len());
    out.extend_from_slice(CEGM_MAGIC);
    out.extend_from_slice(&CEGM_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(Error::Length {
            expected: 12,
            found: bytes.len() as u64,
        });
    }
    if &bytes[0..4] != CEGM_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"CEGM\"",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CEGM_VERSION {
        return Err(Error::Format(format!("unsupported CEGM version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Length {
            expected: 12 + header_len as u64,
            found: bytes.len() as u64,
        });
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let config = ModelConfig {
        layer_dims: header.layer_dims,
        aggregator_kind: header.aggregator_kind,
        readout_kind: header.readout_kind,
        a_dim: header.a_dim,
        attention_divide_by_n: header.attention_divide_by_n,
    };
    let mut params = ModelParams::zeros(config).map_err(|e| Error::Format(e.to_string()))?;
    if params.weights.layout() != header.tensors {
        return Err(Error::Format(
            "tensor table does not match the declared architecture".into(),
        ));
    }
    let payload = &bytes[12 + header_len..];
    let expected = 12 + header_len + 8 * params.weights.len();
    if bytes.len() != expected {
        return Err(Error::Length {
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            index,
            detail: "non-finite weight in checkpoint".into(),
        });
    }
    params.weights.set_flat(&flat)?;
    Ok(Checkpoint {
        params,
        similarity: header.similarity,
        segmentation: header.segmentation,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
