//! Checkpoint files.
//!
//! Layout: `DECALCK1`, a little-endian u64 header length, a JSON header
//! (config, tensor manifest, optional optimizer manifest, digests), then the
//! float32 little-endian payload. The header carries SHA-256 digests of the
//! payload and of its own canonical form so any corruption is rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::optim::{Adam, AdamConfig};
use crate::model::{check_params, ModelConfig};
use crate::tensor::{DType, Params, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DECALCK1";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Params<f32>,
    pub optimizer: Option<Adam>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamConfig,
    t: u64,
    /// First moments then second moments, in parameter order.
    moments: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
    pub header_sha256: String,
}

impl CheckpointHeader {
    fn canonical_digest(&self) -> String {
        let mut h = self.clone();
        h.header_sha256.clear();
        let bytes = serde_json::to_vec(&h).expect("header serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn append(payload: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: String, t: &Tensor<f32>) {
    entries.push(TensorEntry {
        name,
        shape: t.shape().to_vec(),
        dtype: DType::Float32,
        offset: payload.len() as u64,
    });
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.params.iter() {
            append(&mut payload, &mut tensors, name.to_string(), t);
        }
        let optimizer = self.optimizer.as_ref().map(|opt| {
            let mut moments = Vec::new();
            for (tag, set) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, t) in set.iter() {
                    append(&mut payload, &mut moments, format!("{tag}/{name}"), t);
                }
            }
            OptimizerHeader {
                config: opt.config,
                t: opt.t,
                moments,
            }
        });
        let mut header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            tensors,
            optimizer,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            header_sha256: String::new(),
        };
        header.header_sha256 = header.canonical_digest();
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = parse_header(bytes)?;
        let mut cursor = 0u64;
        let mut read = |e: &TensorEntry, seen: &mut BTreeSet<String>| -> Result<Tensor<f32>> {
            if e.dtype != DType::Float32 {
                return Err(corrupt(format!("`{}` has dtype {:?}", e.name, e.dtype)));
            }
            if !seen.insert(e.name.clone()) {
                return Err(corrupt(format!("duplicate tensor `{}`", e.name)));
            }
            if e.offset != cursor {
                return Err(corrupt(format!("`{}` at offset {} but expected {cursor}", e.name, e.offset)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
                .ok_or_else(|| corrupt(format!("`{}` shape overflows", e.name)))?;
            let end = numel
                .checked_mul(4)
                .and_then(|b| b.checked_add(cursor))
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| corrupt(format!("`{}` runs past the payload", e.name)))?;
            let data = payload[cursor as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            cursor = end;
            Tensor::new(e.shape.clone(), data).map_err(|e| corrupt(e.to_string()))
        };
        let mut seen = BTreeSet::new();
        let mut params = Params::new();
        for e in &header.tensors {
            params.insert(e.name.clone(), read(e, &mut seen)?);
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(oh) => {
                let mut m = Params::new();
                let mut v = Params::new();
                for e in &oh.moments {
                    let t = read(e, &mut seen)?;
                    let (set, name) = match e.name.split_once('/') {
                        Some(("m", n)) => (&mut m, n),
                        Some(("v", n)) => (&mut v, n),
                        _ => return Err(corrupt(format!("bad moment name `{}`", e.name))),
                    };
                    match params.get(name) {
                        Some(p) if p.shape() == t.shape() => set.insert(name, t),
                        _ => return Err(corrupt(format!("moment `{}` matches no parameter", e.name))),
                    };
                }
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(corrupt("optimizer state does not cover every parameter"));
                }
                Some(Adam {
                    config: oh.config,
                    t: oh.t,
                    m,
                    v,
                })
            }
        };
        if cursor != payload.len() as u64 {
            return Err(corrupt(format!("{} unclaimed payload bytes", payload.len() as u64 - cursor)));
        }
        check_params(&header.config, &params).map_err(|e| corrupt(e.to_string()))?;
        if let Some(name) = params.first_non_finite() {
            return Err(corrupt(format!("`{name}` holds non-finite values")));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Validates framing, version and both digests; returns the header and the
/// payload slice.
pub fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated("missing magic".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("missing header length".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if len > MAX_HEADER_BYTES {
        return Err(corrupt(format!("header length {len} is implausible")));
    }
    let rest = &bytes[16..];
    if (rest.len() as u64) < len {
        return Err(CheckpointError::Truncated(format!("header needs {len} bytes, {} left", rest.len())));
    }
    let (json, payload) = rest.split_at(len as usize);
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(header.format_version));
    }
    if header.canonical_digest() != header.header_sha256 {
        return Err(corrupt("header digest mismatch"));
    }
    header.config.validate().map_err(|e| corrupt(e.to_string()))?;
    if (payload.len() as u64) < header.payload_bytes {
        return Err(CheckpointError::Truncated(format!(
            "payload needs {} bytes, {} present",
            header.payload_bytes,
            payload.len()
        )));
    }
    if payload.len() as u64 > header.payload_bytes {
        return Err(corrupt("trailing bytes after payload"));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload digest mismatch"));
    }
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let config = ModelConfig::tiny();
        let params = init_params(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &params);
        opt.t = 3;
        opt.m.get_mut("decal.v").unwrap().data_mut()[0] = 0.25;
        Checkpoint {
            config,
            step: 7,
            params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step, 7);
        assert_eq!(back.optimizer.as_ref().unwrap().m.get("decal.v").unwrap().data()[0], 0.25);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 12, 40, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Truncated(_) | CheckpointError::Corrupt(_)), "{cut}: {err}");
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }
}
