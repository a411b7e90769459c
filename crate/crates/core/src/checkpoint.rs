//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor's little-endian data back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{HfnError, Result};
use crate::network::{Hfn, ModelParameters, NetworkConfig, ParamEntry, ParamGroup, ParamKind};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"HFNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub shape: [usize; 4],
    pub dtype: String,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub init_seed: u64,
    pub tensors: Vec<TensorRecord>,
    /// Free-form training metadata (configs, history, seeds).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ModelParameters<f32>,
    pub metadata: serde_json::Value,
}

pub fn encode<T: Element>(config: &NetworkConfig, params: &ModelParameters<T>, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    Hfn::new(config.clone())?.validate_params(params)?;
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(params.entries().len());
    for e in params.entries() {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            group: e.group,
            kind: e.kind,
            shape: e.tensor.shape(),
            dtype: T::DTYPE.to_string(),
            offset: data.len(),
        });
        for &v in e.tensor.data() {
            v.write_le(&mut data);
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        init_seed: params.init_seed(),
        tensors,
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

fn read_values<T: Element>(bytes: &[u8], dtype: &str) -> Result<Vec<T>> {
    match dtype {
        "f32" => Ok(bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect()),
        "f64" => Ok(bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect()),
        other => Err(HfnError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn dtype_bytes(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(HfnError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

/// Parse and validate every tensor against the stored config.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(NetworkConfig, ModelParameters<T>, serde_json::Value)> {
    let bad = |m: &str| HfnError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(HfnError::Checkpoint(format!("format version {version} is not supported")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end])?;
    let data = &bytes[header_end..];
    let net = Hfn::new(header.config.clone())?;
    let mut entries = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let end = n
            .checked_mul(dtype_bytes(&t.dtype)?)
            .and_then(|len| t.offset.checked_add(len))
            .filter(|&e| e <= data.len())
            .ok_or_else(|| HfnError::Checkpoint(format!("tensor {} runs past the end of the file", t.name)))?;
        let values = read_values::<T>(&data[t.offset..end], &t.dtype)?;
        entries.push(ParamEntry {
            name: t.name.clone(),
            group: t.group,
            kind: t.kind,
            tensor: Tensor::from_vec(t.shape, values),
        });
    }
    let params = ModelParameters::from_entries(entries, header.init_seed);
    net.validate_params(&params)
        .map_err(|e| HfnError::Checkpoint(format!("parameters do not match the stored config: {e}")))?;
    Ok((header.config, params, header.metadata))
}

pub fn save<T: Element>(path: &Path, config: &NetworkConfig, params: &ModelParameters<T>, metadata: &serde_json::Value) -> Result<()> {
    write_atomic(path, &encode(config, params, metadata)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HfnError::io(path, e))?;
    let (config, params, metadata) = decode::<f32>(&bytes)?;
    Ok(Checkpoint { config, params, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = NetworkConfig::gradient_check();
        let params = Hfn::new(cfg.clone()).unwrap().init_params::<f32>(11);
        let meta = serde_json::json!({"epochs": 3});
        let bytes = encode(&cfg, &params, &meta).unwrap();
        let (c2, p2, m2) = decode::<f32>(&bytes).unwrap();
        assert_eq!((c2, m2), (cfg, meta));
        assert_eq!(p2, params);
        assert_eq!(p2.init_seed(), 11);
    }

    #[test]
    fn f64_round_trip() {
        let cfg = NetworkConfig::gradient_check();
        let params = Hfn::new(cfg.clone()).unwrap().init_params::<f64>(1);
        let bytes = encode(&cfg, &params, &serde_json::Value::Null).unwrap();
        assert_eq!(decode::<f64>(&bytes).unwrap().1, params);
    }

    #[test]
    fn config_mismatch_fails_loudly() {
        let cfg = NetworkConfig::gradient_check();
        let params = Hfn::new(cfg.clone()).unwrap().init_params::<f32>(0);
        let mut bytes = encode(&cfg, &params, &serde_json::Value::Null).unwrap();
        // Re-encode with a header claiming the tiny config.
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
        header.config = NetworkConfig::tiny();
        let h = serde_json::to_vec(&header).unwrap();
        let data = bytes.split_off(20 + header_len);
        let mut forged = bytes[..12].to_vec();
        forged.extend_from_slice(&(h.len() as u64).to_le_bytes());
        forged.extend_from_slice(&h);
        forged.extend_from_slice(&data);
        assert!(matches!(decode::<f32>(&forged), Err(HfnError::Checkpoint(_))));
    }

    #[test]
    fn garbage_and_truncation_fail() {
        assert!(decode::<f32>(b"definitely not a checkpoint").is_err());
        let cfg = NetworkConfig::gradient_check();
        let params = Hfn::new(cfg.clone()).unwrap().init_params::<f32>(0);
        let bytes = encode(&cfg, &params, &serde_json::Value::Null).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 4]).is_err());
    }
}
