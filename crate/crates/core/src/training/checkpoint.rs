//! Checkpoint file format: one line of JSON manifest (configs plus a tensor
//! directory), then a newline, then all tensor data as raw little-endian
//! f64. Round trips are bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, RmspropState, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

const FORMAT_VERSION: u32 = 1;
const OPT_PREFIX: &str = "rmsprop/";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    hierarchical: bool,
    tensors: Vec<TensorEntry>,
    /// Total payload length in f64 elements.
    total_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: usize,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: RmspropState,
    pub train: TrainConfig,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    opt: &RmspropState,
    train: &TrainConfig,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let all: Vec<(String, &Tensor)> = params
        .tensors()
        .into_iter()
        .chain(
            opt.cache
                .tensors()
                .into_iter()
                .map(|(n, t)| (format!("{OPT_PREFIX}{n}"), t)),
        )
        .collect();
    for (name, t) in all {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: params.config.clone(),
        train: train.clone(),
        hierarchical: params.is_hierarchical(),
        tensors: entries,
        total_len: offset,
    };
    // serde_json emits no raw newlines in compact mode, so the first '\n'
    // cleanly delimits manifest from payload.
    let mut bytes = serde_json::to_vec(&manifest)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    std::fs::write(path.as_ref(), bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref())?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing manifest delimiter".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let payload = &bytes[split + 1..];
    if payload.len() != manifest.total_len * 8 {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but manifest declares {} f64s",
            payload.len(),
            manifest.total_len
        )));
    }

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor> {
        let len: usize = entry.shape.iter().product();
        let start = entry.offset * 8;
        let end = start + len * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} runs past end of payload",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&entry.shape, data)
    };

    // Build shape-correct containers, then fill every tensor by name.
    let mut rng = RngState::new(0);
    let mut params = ModelParams::init(&manifest.model, manifest.hierarchical, &mut rng)?;
    let mut opt = RmspropState::new(&params);

    let expected: Vec<String> = params
        .tensors()
        .into_iter()
        .map(|(n, _)| n)
        .chain(
            opt.cache
                .tensors()
                .into_iter()
                .map(|(n, _)| format!("{OPT_PREFIX}{n}")),
        )
        .collect();
    let found: Vec<&String> = manifest.tensors.iter().map(|e| &e.name).collect();
    if expected.iter().collect::<Vec<_>>() != found {
        return Err(Error::Checkpoint(format!(
            "tensor directory does not match the declared model \
             (expected {} tensors, found {})",
            expected.len(),
            found.len()
        )));
    }

    for entry in &manifest.tensors {
        let value = read_tensor(entry)?;
        if let Some(rest) = entry.name.strip_prefix(OPT_PREFIX) {
            opt.cache.set_tensor(rest, value).map_err(|e| {
                Error::Checkpoint(format!("optimizer tensor {:?}: {e}", entry.name))
            })?;
        } else {
            params.set_tensor(&entry.name, value).map_err(|e| {
                Error::Checkpoint(format!("tensor {:?}: {e}", entry.name))
            })?;
        }
    }
    Ok(Checkpoint {
        params,
        opt,
        train: manifest.train,
    })
}
