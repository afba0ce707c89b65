use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Result, RetrievalError};
use crate::encoder::{encode_graph, pad_mask};
use crate::model::{argmax, ModelConfig, Forward};
use crate::tensor::{Float, Graph, Params, Var};
use crate::tokenizer::TokenId;
use crate::train::{Checkpoint, MetricRecord, TrainConfig, TrainError, Trainer};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalPair {
    pub query: Vec<TokenId>,
    pub passage: Vec<TokenId>,
}

/// Mean over rows of `−log softmax(scores[i])[i]`.
pub fn contrastive_loss_from_scores(scores: &[Vec<f64>]) -> Result<f64> {
    let b = scores.len();
    if b < 2 {
        return Err(RetrievalError::BatchTooSmall(b));
    }
    let mut total = 0.0;
    for (i, row) in scores.iter().enumerate() {
        if row.len() != b {
            return Err(RetrievalError::Shape(format!("score row {i} has {} entries, expected {b}", row.len())));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    Ok(total / b as f64)
}

/// In-batch softmax loss over Chamfer scores of normalized query and
/// passage vectors; pair `i`'s passage is the positive for query `i`.
/// Returns the loss node and the fraction of queries ranking their own
/// passage first.
pub fn contrastive_loss<T: Float>(fwd: &mut Forward, g: &mut Graph<T>, batch: &[RetrievalPair]) -> Result<(Var, f64)> {
    let b = batch.len();
    if b < 2 {
        return Err(RetrievalError::BatchTooSmall(b));
    }
    let mut tower = |g: &mut Graph<T>, ids: &[TokenId]| -> Result<(Var, Vec<bool>)> {
        let enc = encode_graph(fwd, g, ids, &pad_mask(ids))?;
        Ok((g.l2_normalize_rows(enc.out)?, enc.mask))
    };
    let mut queries = Vec::with_capacity(b);
    let mut passages = Vec::with_capacity(b);
    for pair in batch {
        queries.push(tower(g, &pair.query)?.0);
        passages.push(tower(g, &pair.passage)?);
    }
    let mut scores = Vec::with_capacity(b * b);
    for &q in &queries {
        for (p, mask) in &passages {
            scores.push(g.chamfer(q, *p, mask)?);
        }
    }
    let logits = g.stack(&scores, &[b, b])?;
    let hits = (0..b).filter(|&i| argmax(g.value(logits).row(i)) == i).count();
    let targets: Vec<usize> = (0..b).collect();
    let weights = vec![T::lit(1.0 / b as f64); b];
    Ok((g.cross_entropy(logits, &targets, &weights)?, hits as f64 / b as f64))
}

/// A random contiguous window of `len` tokens (the whole passage if shorter).
pub fn excerpt(passage: &[TokenId], len: usize, rng: &mut impl Rng) -> Vec<TokenId> {
    crate::train::data::crop(passage, len, rng).to_vec()
}

/// Dual-encoder fine-tuning: each step draws `batch_size` distinct passages
/// and a fresh random excerpt of `query_len` tokens from each as its query.
pub fn retrieval_finetune(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    params: Option<Params<f32>>,
    passages: &[Vec<TokenId>],
    query_len: usize,
) -> Result<(Checkpoint, Vec<MetricRecord>)> {
    if passages.len() < 2 {
        return Err(RetrievalError::BatchTooSmall(passages.len()));
    }
    let mut tr = match params {
        None => Trainer::new(cfg.clone(), tcfg.clone())?,
        Some(p) => Trainer::with_params(cfg.clone(), tcfg.clone(), p, ChaCha8Rng::seed_from_u64(tcfg.seed))?,
    };
    let b = tcfg.batch_size.clamp(2, passages.len());
    while tr.step < tcfg.steps {
        let idx = sample(&mut tr.rng, passages.len(), b).into_vec();
        let batch: Vec<RetrievalPair> = idx
            .iter()
            .map(|&i| RetrievalPair {
                query: excerpt(&passages[i], query_len, &mut tr.rng),
                passage: passages[i].clone(),
            })
            .collect();
        tr.step_with(|g, fwd| {
            contrastive_loss(fwd, g, &batch).map_err(|e| match e {
                RetrievalError::Model(m) => TrainError::Model(m),
                RetrievalError::Tensor(t) => TrainError::Tensor(t),
                RetrievalError::Train(t) => t,
                other => TrainError::Data(other.to_string()),
            })
        })?;
    }
    Ok((tr.checkpoint(), tr.metrics))
}
