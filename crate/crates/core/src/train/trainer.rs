use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{crop, make_example, EpochSampler};
use super::{lr_schedule, Adam, AdamConfig, Checkpoint, MetricRecord, Task, TrainConfig, TrainError};
use crate::corruption::CorruptionExample;
use crate::encoder::{encode_graph, pad_mask};
use crate::model::{
    argmax, check_params, graft_decal_params, init_params, target_mask, token_weights, EncoderMode, Forward, ModelConfig,
    ModelError,
};
use crate::tensor::{Float, Graph, Params, Tensor, TensorError, Var};
use crate::tokenizer::{TokenId, EOS_ID, PAD_ID};

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Parameter state plus the single seeded generator every random choice
/// (init, data order, corruption, dropout) is drawn from.
pub struct Trainer {
    pub cfg: ModelConfig,
    pub tcfg: TrainConfig,
    pub params: Params<f32>,
    pub opt: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub metrics: Vec<MetricRecord>,
    start: Instant,
    window: (f64, f64, u64),
}

impl Trainer {
    /// Fresh parameters drawn from `ChaCha8(tcfg.seed)`.
    pub fn new(cfg: ModelConfig, tcfg: TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        let params = init_params(&cfg, &mut rng)?;
        Self::with_params(cfg, tcfg, params, rng)
    }

    pub fn with_params(cfg: ModelConfig, tcfg: TrainConfig, params: Params<f32>, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        tcfg.validate()?;
        check_params(&cfg, &params)?;
        let opt = Adam::new(AdamConfig::default(), &params);
        Ok(Self {
            cfg,
            tcfg,
            params,
            opt,
            step: 0,
            rng,
            metrics: Vec::new(),
            start: Instant::now(),
            window: (0.0, 0.0, 0),
        })
    }

    /// One optimizer step on the scalar loss built by `loss_fn`, which
    /// returns the loss node and a batch accuracy.
    pub fn step_with<F>(&mut self, loss_fn: F) -> Result<StepStats>
    where
        F: FnOnce(&mut Graph<f32>, &mut Forward) -> Result<(Var, f64)>,
    {
        let step = self.step;
        let lr = lr_schedule(step, self.tcfg.warmup_steps, self.tcfg.base_lr);
        let dropout_seed: u64 = self.rng.gen();
        let mut g = Graph::new();
        let binding = g.bind(&self.params)?;
        let mut fwd = Forward::new(&self.cfg, &binding).with_dropout(ChaCha8Rng::seed_from_u64(dropout_seed));
        let (loss, accuracy) = loss_fn(&mut g, &mut fwd).map_err(|e| numeric(e, step))?;
        let loss_value = g.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: "loss".into(),
            });
        }
        let grads = g.backward(loss).map_err(|e| numeric(e.into(), step))?.named(&g, &binding);
        if let Some(name) = grads.first_non_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("gradient of `{name}`"),
            });
        }
        self.opt.step(&mut self.params, &grads, lr);
        if let Some(name) = self.params.first_non_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("parameter `{name}` after update"),
            });
        }
        self.step += 1;
        self.window.0 += loss_value;
        self.window.1 += accuracy;
        self.window.2 += 1;
        if self.step % self.tcfg.log_every == 0 || self.step == self.tcfg.steps {
            self.flush_metrics(lr);
        }
        Ok(StepStats {
            step,
            loss: loss_value,
            accuracy,
            lr,
        })
    }

    fn flush_metrics(&mut self, lr: f64) {
        let (l, a, n) = self.window;
        if n == 0 {
            return;
        }
        self.metrics.push(MetricRecord {
            step: self.step,
            loss: l / n as f64,
            accuracy: a / n as f64,
            lr,
            wall_ms: self.start.elapsed().as_millis() as u64,
        });
        self.window = (0.0, 0.0, 0);
    }

    pub fn seq2seq_step(&mut self, batch: &[CorruptionExample]) -> Result<StepStats> {
        self.step_with(|g, fwd| seq2seq_loss(fwd, g, batch))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            params: self.params.clone(),
            optimizer: Some(self.opt.clone()),
        }
    }
}

fn numeric(e: TrainError, step: u64) -> TrainError {
    match e {
        TrainError::Tensor(TensorError::NonFinite { op }) | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => {
            TrainError::NonFinite {
                step,
                detail: format!("output of `{op}`"),
            }
        }
        other => other,
    }
}

/// Batch loss averaged over every non-pad target token in the batch, plus
/// teacher-forced accuracy over the same tokens.
pub fn seq2seq_loss<T: Float>(fwd: &mut Forward, g: &mut Graph<T>, batch: &[CorruptionExample]) -> Result<(Var, f64)> {
    let masks: Vec<Vec<bool>> = batch.iter().map(|ex| target_mask(&ex.decoder_target)).collect();
    let total: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    if total == 0 {
        return Err(TrainError::Data("batch has no target tokens".into()));
    }
    let mut parts = Vec::with_capacity(batch.len());
    let mut correct = 0usize;
    for (ex, mask) in batch.iter().zip(&masks) {
        let enc = encode_graph(fwd, g, &ex.encoder_tokens, &pad_mask(&ex.encoder_tokens))?;
        let logits = fwd.decoder(g, &ex.decoder_input, enc.out, &enc.mask)?;
        let targets: Vec<usize> = ex.decoder_target.iter().map(|&t| t as usize).collect();
        let weights = token_weights::<T>(mask, total);
        parts.push(g.cross_entropy(logits, &targets, &weights)?);
        let lv = g.value(logits);
        correct += (0..targets.len()).filter(|&i| mask[i] && argmax(lv.row(i)) == targets[i]).count();
    }
    let stacked = g.stack(&parts, &[parts.len()])?;
    Ok((g.sum(stacked)?, correct as f64 / total as f64))
}

/// Pretraining on raw documents: every step samples `batch_size` documents,
/// crops them to `sequence_length` and builds fresh examples for the task.
pub fn pretrain(cfg: &ModelConfig, tcfg: &TrainConfig, corpus: &[Vec<TokenId>]) -> Result<(Checkpoint, Vec<MetricRecord>)> {
    if corpus.is_empty() {
        return Err(TrainError::Data("empty corpus".into()));
    }
    if let Some(i) = corpus.iter().position(|d| d.len() < 2) {
        return Err(TrainError::Data(format!("document {i} has fewer than 2 tokens")));
    }
    if !matches!(tcfg.task, Task::SpanCorruption | Task::Autoencode) {
        return Err(TrainError::Config(format!("pretrain does not run task {}", tcfg.task)));
    }
    let mut tr = Trainer::new(cfg.clone(), tcfg.clone())?;
    while tr.step < tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let doc = &corpus[tr.rng.gen_range(0..corpus.len())];
            let doc = crop(doc, tcfg.sequence_length, &mut tr.rng);
            batch.push(make_example(tcfg.task, doc, &tcfg.corruption, &mut tr.rng)?);
        }
        tr.seq2seq_step(&batch)?;
    }
    Ok((tr.checkpoint(), tr.metrics))
}

/// Trains on a fixed example set in shuffled passes. `params = None` draws
/// a fresh initialization from the seed.
pub fn fit(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    params: Option<Params<f32>>,
    examples: &[CorruptionExample],
) -> Result<(Checkpoint, Vec<MetricRecord>)> {
    if examples.is_empty() {
        return Err(TrainError::Data("empty example set".into()));
    }
    let mut tr = match params {
        None => Trainer::new(cfg.clone(), tcfg.clone())?,
        Some(p) => Trainer::with_params(cfg.clone(), tcfg.clone(), p, ChaCha8Rng::seed_from_u64(tcfg.seed))?,
    };
    run_fixed(&mut tr, examples)?;
    Ok((tr.checkpoint(), tr.metrics))
}

fn run_fixed(tr: &mut Trainer, examples: &[CorruptionExample]) -> Result<()> {
    let mut sampler = EpochSampler::new(examples.len());
    while tr.step < tr.tcfg.steps {
        let idx = sampler.batch(tr.tcfg.batch_size, &mut tr.rng);
        let batch: Vec<CorruptionExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        tr.seq2seq_step(&batch)?;
        if let Some(target) = tr.tcfg.stop_at_accuracy {
            if tr.step % tr.tcfg.log_every == 0 {
                let acc = evaluate(&tr.cfg, &tr.params, examples, Metric::TokenAccuracy)?;
                if acc >= target {
                    break;
                }
            }
        }
    }
    if tr.window.2 > 0 {
        let lr = lr_schedule(tr.step.saturating_sub(1), tr.tcfg.warmup_steps, tr.tcfg.base_lr);
        tr.flush_metrics(lr);
    }
    Ok(())
}

fn same_shape_family(a: &ModelConfig, b: &ModelConfig) -> bool {
    (a.d_model, a.n_heads, a.d_kv, a.d_ff, a.n_enc_layers, a.n_dec_layers, a.vocab_size, a.num_buckets, a.max_distance)
        == (b.d_model, b.n_heads, b.d_kv, b.d_ff, b.n_enc_layers, b.n_dec_layers, b.vocab_size, b.num_buckets, b.max_distance)
}

/// Fine-tunes `base` under `cfg` with a fresh optimizer.
///
/// With `tcfg.graft_decal` the base must be a baseline checkpoint and `cfg`
/// a DeCAL config; `decal.v` (zero) and the latent norm scale (one) are
/// added and every other weight is carried over. Otherwise the encoder mode
/// must match the base; the compression ratio may change.
pub fn finetune(
    base: &Checkpoint,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    examples: &[CorruptionExample],
) -> Result<(Checkpoint, Vec<MetricRecord>)> {
    cfg.validate()?;
    if !same_shape_family(&base.config, cfg) {
        return Err(ModelError::Incompatible("fine-tune config changes model dimensions".into()).into());
    }
    let mut params = base.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    if tcfg.graft_decal {
        if base.config.encoder_mode != EncoderMode::Baseline {
            return Err(TrainError::Config(format!(
                "graft_decal needs a baseline checkpoint, got {}",
                base.config.encoder_mode
            )));
        }
        if cfg.encoder_mode != EncoderMode::Decal {
            return Err(TrainError::Config("graft_decal needs encoder_mode decal".into()));
        }
        graft_decal_params(cfg, &mut params, &mut rng);
    } else if base.config.encoder_mode != cfg.encoder_mode {
        return Err(TrainError::Config(format!(
            "checkpoint encoder mode {} differs from {}; use graft_decal to add compression",
            base.config.encoder_mode, cfg.encoder_mode
        )));
    }
    let mut tr = Trainer::with_params(cfg.clone(), tcfg.clone(), params, rng)?;
    run_fixed(&mut tr, examples)?;
    Ok((tr.checkpoint(), tr.metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Teacher-forced argmax accuracy over all target tokens.
    TokenAccuracy,
    /// Fraction of examples whose greedy decode equals the target.
    ExactMatch,
}

/// Greedy decode until eos or `max_len` tokens; eos is not returned.
pub fn greedy_decode(cfg: &ModelConfig, params: &Params<f32>, encoder_tokens: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
    let mut g = Graph::new();
    let b = g.bind(params)?;
    let enc = encode_graph(&mut Forward::new(cfg, &b), &mut g, encoder_tokens, &pad_mask(encoder_tokens))?;
    let memory: Tensor<f32> = g.value(enc.out).clone();
    let mut out = Vec::new();
    let mut input = vec![PAD_ID];
    while out.len() < max_len {
        let mut g = Graph::new();
        let b = g.bind(params)?;
        let mem = g.constant(memory.clone())?;
        let logits = Forward::new(cfg, &b).decoder(&mut g, &input, mem, &enc.mask)?;
        let lv = g.value(logits);
        let next = argmax(lv.row(lv.rows() - 1)) as TokenId;
        if next == EOS_ID {
            break;
        }
        out.push(next);
        input.push(next);
    }
    Ok(out)
}

/// `pred` against a target that may carry a trailing eos.
pub fn exact_match(pred: &[TokenId], target: &[TokenId]) -> bool {
    let target = target.strip_suffix(&[EOS_ID]).unwrap_or(target);
    pred == target
}

pub fn evaluate(cfg: &ModelConfig, params: &Params<f32>, examples: &[CorruptionExample], metric: Metric) -> Result<f64> {
    if examples.is_empty() {
        return Err(TrainError::Data("empty evaluation set".into()));
    }
    match metric {
        Metric::TokenAccuracy => {
            let (mut correct, mut total) = (0usize, 0usize);
            for ex in examples {
                let mut g = Graph::new();
                let b = g.bind(params)?;
                let mut fwd = Forward::new(cfg, &b);
                let enc = encode_graph(&mut fwd, &mut g, &ex.encoder_tokens, &pad_mask(&ex.encoder_tokens))?;
                let logits = fwd.decoder(&mut g, &ex.decoder_input, enc.out, &enc.mask)?;
                let lv = g.value(logits);
                for (i, &t) in ex.decoder_target.iter().enumerate().filter(|(_, &t)| t != PAD_ID) {
                    total += 1;
                    correct += (argmax(lv.row(i)) == t as usize) as usize;
                }
            }
            if total == 0 {
                return Err(TrainError::Data("evaluation set has no target tokens".into()));
            }
            Ok(correct as f64 / total as f64)
        }
        Metric::ExactMatch => {
            let mut hits = 0usize;
            for ex in examples {
                let pred = greedy_decode(cfg, params, &ex.encoder_tokens, ex.decoder_target.len() + 1)?;
                hits += exact_match(&pred, &ex.decoder_target) as usize;
            }
            Ok(hits as f64 / examples.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_rules() {
        assert!(exact_match(&[5, 6], &[5, 6, EOS_ID]));
        assert!(exact_match(&[5, 6], &[5, 6]));
        assert!(!exact_match(&[], &[5, EOS_ID]));
        assert!(!exact_match(&[5], &[5, 6, EOS_ID]));
    }
}
