//! Compressed passage store.
//!
//! Layout: `DECALPS1`, a little-endian u64 header length, a JSON header
//! (version, width, compression ratio, record index, digests), then one
//! record per passage: `m` i32 latent positions followed by `m × d_model`
//! float32 values, all little-endian.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Result, RetrievalError};
use crate::encoder::{encode_graph, pad_mask, CompressedRepresentation};
use crate::model::{Forward, ModelConfig};
use crate::tensor::{Graph, Params, Tensor};
use crate::tokenizer::TokenId;

pub const STORE_MAGIC: &[u8; 8] = b"DECALPS1";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub id: String,
    pub latent_positions: Vec<i32>,
    /// `[m, d_model]`, rows L2-normalized.
    pub vectors: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedPassageStore {
    pub d_model: usize,
    pub compression: usize,
    pub records: Vec<StoreRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    id: String,
    m: usize,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreHeader {
    format_version: u32,
    d_model: usize,
    compression: usize,
    records: Vec<IndexEntry>,
    payload_bytes: u64,
    payload_sha256: String,
    header_sha256: String,
}

impl StoreHeader {
    fn canonical_digest(&self) -> String {
        let mut h = self.clone();
        h.header_sha256.clear();
        hex::encode(Sha256::digest(serde_json::to_vec(&h).expect("header serializes")))
    }
}

fn corrupt(msg: impl Into<String>) -> RetrievalError {
    RetrievalError::Corrupt(msg.into())
}

/// Encodes `ids` and L2-normalizes each output row; masked (all-pad)
/// latent rows are dropped.
pub fn encode_normalized(cfg: &ModelConfig, params: &Params<f32>, ids: &[TokenId]) -> Result<CompressedRepresentation<f32>> {
    let mut g = Graph::new();
    let b = g.bind(params)?;
    let enc = encode_graph(&mut Forward::new(cfg, &b), &mut g, ids, &pad_mask(ids))?;
    let normed = g.l2_normalize_rows(enc.out)?;
    let v = g.value(normed);
    let keep: Vec<usize> = (0..enc.mask.len()).filter(|&i| enc.mask[i]).collect();
    let rows: Vec<Vec<f32>> = keep.iter().map(|&i| v.row(i).to_vec()).collect();
    Ok(CompressedRepresentation {
        vectors: Tensor::from_rows(&rows)?,
        latent_positions: keep.iter().map(|&i| enc.positions[i]).collect(),
        mask: vec![true; keep.len()],
        source_length: enc.source_length,
        compression: enc.compression,
    })
}

/// Encodes every passage with the checkpoint's encoder.
pub fn encode_corpus(cfg: &ModelConfig, params: &Params<f32>, passages: &[(String, Vec<TokenId>)]) -> Result<CompressedPassageStore> {
    if passages.is_empty() {
        return Err(RetrievalError::Empty("corpus"));
    }
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(passages.len());
    for (id, toks) in passages {
        if !seen.insert(id.as_str()) {
            return Err(RetrievalError::DuplicateId(id.clone()));
        }
        if toks.is_empty() {
            return Err(RetrievalError::Empty("passage"));
        }
        let rep = encode_normalized(cfg, params, toks)?;
        records.push(StoreRecord {
            id: id.clone(),
            latent_positions: rep.latent_positions.iter().map(|&p| p as i32).collect(),
            vectors: rep.vectors,
        });
    }
    Ok(CompressedPassageStore {
        d_model: cfg.d_model,
        compression: cfg.compression_ratio,
        records,
    })
}

impl CompressedPassageStore {
    /// Total stored vectors, `Σ m_i`.
    pub fn total_vectors(&self) -> usize {
        self.records.iter().map(|r| r.vectors.rows()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut index = Vec::with_capacity(self.records.len());
        for r in &self.records {
            index.push(IndexEntry {
                id: r.id.clone(),
                m: r.vectors.rows(),
                offset: payload.len() as u64,
            });
            for p in &r.latent_positions {
                payload.extend_from_slice(&p.to_le_bytes());
            }
            for v in r.vectors.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut header = StoreHeader {
            format_version: STORE_VERSION,
            d_model: self.d_model,
            compression: self.compression,
            records: index,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            header_sha256: String::new(),
        };
        header.header_sha256 = header.canonical_digest();
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(RetrievalError::Truncated("missing magic or header length".into()));
        }
        if &bytes[..8] != STORE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[16..];
        if len > rest.len() as u64 {
            return Err(RetrievalError::Truncated(format!("header needs {len} bytes, {} left", rest.len())));
        }
        let (json, payload) = rest.split_at(len as usize);
        let header: StoreHeader = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format_version != STORE_VERSION {
            return Err(corrupt(format!("unsupported version {}", header.format_version)));
        }
        if header.canonical_digest() != header.header_sha256 {
            return Err(corrupt("header digest mismatch"));
        }
        if header.d_model == 0 || header.compression == 0 {
            return Err(corrupt("zero d_model or compression"));
        }
        if (payload.len() as u64) < header.payload_bytes {
            return Err(RetrievalError::Truncated(format!(
                "payload needs {} bytes, {} present",
                header.payload_bytes,
                payload.len()
            )));
        }
        if payload.len() as u64 != header.payload_bytes {
            return Err(corrupt("trailing bytes after payload"));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload digest mismatch"));
        }
        let d = header.d_model;
        let mut cursor = 0usize;
        let mut seen = BTreeSet::new();
        let mut records = Vec::with_capacity(header.records.len());
        for e in &header.records {
            if !seen.insert(e.id.clone()) {
                return Err(corrupt(format!("duplicate id `{}`", e.id)));
            }
            if e.offset != cursor as u64 {
                return Err(corrupt(format!("record `{}` at offset {} but expected {cursor}", e.id, e.offset)));
            }
            let bytes_needed = e
                .m
                .checked_mul(d + 1)
                .and_then(|n| n.checked_mul(4))
                .filter(|&n| cursor + n <= payload.len())
                .ok_or_else(|| corrupt(format!("record `{}` runs past the payload", e.id)))?;
            let rec = &payload[cursor..cursor + bytes_needed];
            let (pos, vecs) = rec.split_at(e.m * 4);
            let latent_positions = pos.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect();
            let data = vecs.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
            records.push(StoreRecord {
                id: e.id.clone(),
                latent_positions,
                vectors: Tensor::new(vec![e.m, d], data)?,
            });
            cursor += bytes_needed;
        }
        if cursor != payload.len() {
            return Err(corrupt("unclaimed payload bytes"));
        }
        Ok(Self {
            d_model: d,
            compression: header.compression,
            records,
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
