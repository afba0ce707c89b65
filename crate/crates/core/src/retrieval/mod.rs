//! Multi-vector retrieval over compressed passage representations.
//!
//! Queries and passages go through the same encoder; every output vector is
//! L2-normalized and a passage is scored by Chamfer (MaxSim) similarity.

mod contrastive;
mod eval;
mod store;

use thiserror::Error;

pub use contrastive::{contrastive_loss, contrastive_loss_from_scores, excerpt, retrieval_finetune, RetrievalPair};
pub use eval::{ndcg_at_10, read_id_text_tsv, read_qrels, Qrels};
pub use store::{encode_corpus, encode_normalized, CompressedPassageStore, StoreRecord, STORE_MAGIC, STORE_VERSION};

use crate::model::{ModelConfig, ModelError};
use crate::tensor::{Float, Graph, Params, Tensor, TensorError};
use crate::tokenizer::TokenId;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("document has no unmasked vectors")]
    FullyMasked,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("in-batch contrastive loss needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("duplicate passage id `{0}`")]
    DuplicateId(String),
    #[error("query has no relevant passages")]
    NoPositives,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("truncated store: {0}")]
    Truncated(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("malformed {file} line {line}: {detail}")]
    Parse { file: String, line: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

type Result<T> = std::result::Result<T, RetrievalError>;

/// `Σ_i max_{j: mask[j]} q_i · d_j`.
pub fn chamfer_similarity<T: Float>(q: &Tensor<T>, d: &Tensor<T>, d_mask: &[bool]) -> Result<f64> {
    if q.rows() == 0 {
        return Err(RetrievalError::Empty("query"));
    }
    if q.last_dim() != d.last_dim() || d_mask.len() != d.rows() {
        return Err(RetrievalError::Shape(format!(
            "query {:?}, document {:?}, mask {}",
            q.shape(),
            d.shape(),
            d_mask.len()
        )));
    }
    if !d_mask.iter().any(|&m| m) {
        return Err(RetrievalError::FullyMasked);
    }
    let mut g = Graph::new();
    let qv = g.constant(q.clone())?;
    let dv = g.constant(d.clone())?;
    let s = g.chamfer(qv, dv, d_mask)?;
    Ok(g.value(s).data()[0].to_f64())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ranked: Vec<Ranked>,
    /// Query–passage vector dot products performed: `m_q · Σ m_p`.
    pub dot_products: u64,
}

/// Scores every stored passage against already-normalized query vectors.
/// Descending score; ties go to the smaller passage id.
pub fn score_store(query: &Tensor<f32>, store: &CompressedPassageStore, k: usize) -> Result<RetrievalResult> {
    if store.records.is_empty() {
        return Err(RetrievalError::Empty("store"));
    }
    if k == 0 {
        return Err(RetrievalError::Empty("k"));
    }
    if query.last_dim() != store.d_model {
        return Err(RetrievalError::Shape(format!("query width {} vs store {}", query.last_dim(), store.d_model)));
    }
    let mut ranked = Vec::with_capacity(store.records.len());
    let mut dot_products = 0u64;
    for rec in &store.records {
        let mask = vec![true; rec.vectors.rows()];
        let score = chamfer_similarity(query, &rec.vectors, &mask)?;
        dot_products += (query.rows() * rec.vectors.rows()) as u64;
        ranked.push(Ranked { id: rec.id.clone(), score });
    }
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    ranked.truncate(k);
    Ok(RetrievalResult { ranked, dot_products })
}

/// Encodes the query with the checkpoint's encoder and ranks the store.
pub fn retrieve(cfg: &ModelConfig, params: &Params<f32>, store: &CompressedPassageStore, query: &[TokenId], k: usize) -> Result<RetrievalResult> {
    if cfg.compression_ratio != store.compression || cfg.d_model != store.d_model {
        return Err(RetrievalError::Shape(format!(
            "model (d={}, C={}) does not match store (d={}, C={})",
            cfg.d_model, cfg.compression_ratio, store.d_model, store.compression
        )));
    }
    let q = encode_normalized(cfg, params, query)?;
    score_store(&q.vectors, store, k)
}
