//! Binary checkpoint files.
//!
//! ```text
//! "ASFF"            4 bytes
//! version           u32 LE
//! header length     u64 LE
//! header            UTF-8 JSON, `name -> {dtype, shape, offset, length}`
//!                   plus a `__metadata__` object
//! blobs             little-endian f32, offsets relative to the blob start
//! ```
//!
//! Files are written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::optim::Sgd;
use crate::error::{Error, Result};
use crate::model::{Detector, ModelConfig};
use crate::params::{Init, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"ASFF";
pub const FORMAT_VERSION: u32 = 1;
pub const METADATA_KEY: &str = "__metadata__";
const PREAMBLE: usize = 4 + 4 + 8;
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: [usize; 4],
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub metadata: Value,
    /// In blob order.
    pub tensors: Vec<(String, TensorEntry)>,
    /// Absolute file offset of the first blob byte.
    pub data_start: usize,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode(metadata: &Value, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    header.insert(METADATA_KEY.to_owned(), metadata.clone());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if name == METADATA_KEY || header.contains_key(name) {
            return Err(Error::invalid(format!("duplicate or reserved tensor name {name}")));
        }
        let length = (t.data().len() * 4) as u64;
        let entry = TensorEntry { dtype: "f32".into(), shape: t.shape().dims(), offset, length };
        header.insert(name.clone(), serde_json::to_value(entry)?);
        offset += length;
    }
    let header = serde_json::to_vec(&Value::Object(header))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < PREAMBLE {
        return Err(format_err(format!("file is {} bytes, shorter than the {PREAMBLE}-byte preamble", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(format_err(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}, expected {FORMAT_VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let data_start = (PREAMBLE as u64).checked_add(header_len).filter(|e| *e <= bytes.len() as u64).ok_or_else(|| {
        format_err(format!("truncated header: needs {header_len} bytes, {} available", bytes.len() - PREAMBLE))
    })? as usize;
    let raw: BTreeMap<String, Value> =
        serde_json::from_slice(&bytes[PREAMBLE..data_start]).map_err(|e| format_err(format!("malformed header: {e}")))?;
    let blob_len = (bytes.len() - data_start) as u64;
    let mut metadata = Value::Null;
    let mut tensors = Vec::new();
    for (name, v) in raw {
        if name == METADATA_KEY {
            metadata = v;
            continue;
        }
        let e: TensorEntry = serde_json::from_value(v).map_err(|e| format_err(format!("tensor {name}: {e}")))?;
        if e.dtype != "f32" {
            return Err(format_err(format!("tensor {name}: unsupported dtype {}", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.length != numel as u64 * 4 {
            return Err(format_err(format!("tensor {name}: length {} does not match shape {:?}", e.length, e.shape)));
        }
        if e.offset.checked_add(e.length).is_none_or(|end| end > blob_len) {
            return Err(format_err(format!("tensor {name}: bytes {}..{} beyond the {blob_len}-byte data section", e.offset, e.offset + e.length)));
        }
        tensors.push((name, e));
    }
    tensors.sort_by_key(|(_, e)| e.offset);
    Ok(Header { metadata, tensors, data_start })
}

/// Reads one tensor's bytes from a whole file image.
pub fn read_tensor(bytes: &[u8], header: &Header, entry: &TensorEntry) -> Result<Tensor<f32>> {
    let start = header.data_start + entry.offset as usize;
    let raw = &bytes[start..start + entry.length as usize];
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let [n, c, h, w] = entry.shape;
    Tensor::from_vec(Shape::new(n, c, h, w), data)
}

pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<(String, Tensor<f32>)>)> {
    let header = parse_header(bytes)?;
    let tensors = header.tensors.iter().map(|(name, e)| Ok((name.clone(), read_tensor(bytes, &header, e)?))).collect::<Result<_>>()?;
    Ok((header.metadata, tensors))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub tool_version: String,
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Detector<f32>,
    pub optimizer: Sgd<f32>,
    pub epoch: usize,
    pub seed: u64,
}

pub fn encode_state(state: &TrainState) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: state.model.config().clone(),
        seed: state.seed,
        epoch: state.epoch,
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
    };
    let store = state.model.params();
    let velocity: Vec<Tensor<f32>> = store
        .iter()
        .zip(&state.optimizer.velocity)
        .map(|((_, _, t), v)| Tensor::from_vec(t.shape(), v.clone()))
        .collect::<Result<_>>()?;
    let mut tensors: Vec<(String, &Tensor<f32>)> = store.iter().map(|(_, n, t)| (n.to_owned(), t)).collect();
    tensors.extend(store.iter().zip(&velocity).map(|((_, n, _), v)| (format!("{MOMENTUM_PREFIX}{n}"), v)));
    encode(&serde_json::to_value(meta)?, &tensors)
}

pub fn decode_state(bytes: &[u8]) -> Result<TrainState> {
    let (meta, tensors) = decode(bytes)?;
    let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| format_err(format!("checkpoint metadata: {e}")))?;
    let mut store = ParamStore::new(meta.seed);
    let mut momentum = BTreeMap::new();
    for (name, t) in tensors {
        match name.strip_prefix(MOMENTUM_PREFIX) {
            Some(p) => {
                momentum.insert(p.to_owned(), t.into_data());
            }
            None => {
                let idx = store.add(name, t.shape(), Init::Zeros);
                store.set(idx, t.into_data())?;
            }
        }
    }
    let model = Detector::from_params(&meta.model, store)?;
    let velocity = model
        .params()
        .iter()
        .map(|(_, name, t)| match momentum.remove(name) {
            Some(v) if v.len() == t.shape().numel() => Ok(v),
            _ => Err(format_err(format!("missing or malformed momentum buffer for {name}"))),
        })
        .collect::<Result<_>>()?;
    if let Some(extra) = momentum.keys().next() {
        return Err(format_err(format!("momentum buffer for unknown parameter {extra}")));
    }
    let optimizer = Sgd { config: Default::default(), velocity };
    Ok(TrainState { model, optimizer, epoch: meta.epoch, seed: meta.seed })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_state(state)?)
}

/// The optimizer config is not stored; the returned state carries defaults.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes)
}
