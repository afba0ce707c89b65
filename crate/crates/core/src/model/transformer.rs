use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::bucket::bucket_matrix;
use super::{ModelConfig, ModelError};
use crate::tensor::{Binding, Float, Graph, Params, Tensor, Var};
use crate::tokenizer::{TokenId, PAD_ID};

type Result<T> = std::result::Result<T, ModelError>;

/// One forward pass over bound parameters.
///
/// Dropout is applied only when a generator is attached with
/// [`Forward::with_dropout`] and the config's rate is non-zero.
pub struct Forward<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Binding,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Binding) -> Self {
        Self {
            cfg,
            params,
            dropout_rng: None,
        }
    }

    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        if self.cfg.dropout > 0.0 {
            self.dropout_rng = Some(rng);
        }
        self
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        Ok(self.params.get(name)?)
    }

    fn dropout<T: Float>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let rate = self.cfg.dropout;
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = (0..g.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        Ok(g.mul_const(x, mask)?)
    }

    /// Token embeddings `[n, d_model]`.
    pub fn embed<T: Float>(&mut self, g: &mut Graph<T>, ids: &[TokenId]) -> Result<Var> {
        let table = self.p("shared.embedding")?;
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(g.gather(table, &ids)?)
    }

    /// Multi-head attention with projections under `prefix` (`.q .k .v .o`).
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head<T: Float>(
        &mut self,
        g: &mut Graph<T>,
        prefix: &str,
        query_in: Var,
        kv_in: Var,
        bias: Option<Var>,
        key_mask: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let q = g.matmul(query_in, self.p(&format!("{prefix}.q"))?)?;
        let k = g.matmul(kv_in, self.p(&format!("{prefix}.k"))?)?;
        let v = g.matmul(kv_in, self.p(&format!("{prefix}.v"))?)?;
        let a = g.attention(q, k, v, self.cfg.n_heads, bias, key_mask, causal)?;
        Ok(g.matmul(a, self.p(&format!("{prefix}.o"))?)?)
    }

    fn ffn<T: Float>(&mut self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let gate = g.matmul(x, self.p(&format!("{prefix}.wi0"))?)?;
        let gate = g.gelu(gate)?;
        let lin = g.matmul(x, self.p(&format!("{prefix}.wi1"))?)?;
        let h = g.mul(gate, lin)?;
        let h = self.dropout(g, h)?;
        Ok(g.matmul(h, self.p(&format!("{prefix}.wo"))?)?)
    }

    fn residual_attention<T: Float>(
        &mut self,
        g: &mut Graph<T>,
        prefix: &str,
        x: Var,
        memory: Option<Var>,
        bias: Option<Var>,
        key_mask: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let h = g.rms_norm(x, self.p(&format!("{prefix}_norm"))?)?;
        let kv = memory.unwrap_or(h);
        let a = self.multi_head(g, prefix, h, kv, bias, key_mask, causal)?;
        let a = self.dropout(g, a)?;
        Ok(g.add(x, a)?)
    }

    fn residual_ffn<T: Float>(&mut self, g: &mut Graph<T>, layer: &str, x: Var) -> Result<Var> {
        let h = g.rms_norm(x, self.p(&format!("{layer}.ffn_norm"))?)?;
        let f = self.ffn(g, &format!("{layer}.ffn"), h)?;
        let f = self.dropout(g, f)?;
        Ok(g.add(x, f)?)
    }

    /// Bidirectional encoder over `x: [L, d_model]` at arbitrary position
    /// indices. Masked rows are invisible as keys.
    pub fn encoder<T: Float>(&mut self, g: &mut Graph<T>, x: Var, positions: &[usize], mask: &[bool]) -> Result<Var> {
        let len = g.value(x).rows();
        if len == 0 {
            return Err(ModelError::EmptyInput);
        }
        if positions.len() != len || mask.len() != len {
            return Err(ModelError::Incompatible(format!(
                "{len} rows, {} positions, {} mask entries",
                positions.len(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(ModelError::AllMasked);
        }
        let buckets = bucket_matrix(positions, positions, true, self.cfg.num_buckets, self.cfg.max_distance);
        let bias = g.rel_bias(self.p("encoder.rel_bias")?, buckets, len, len)?;
        let mut h = self.dropout(g, x)?;
        for i in 0..self.cfg.n_enc_layers {
            let layer = format!("encoder.layer.{i}");
            h = self.residual_attention(g, &format!("{layer}.self_attn"), h, None, Some(bias), mask, false)?;
            h = self.residual_ffn(g, &layer, h)?;
        }
        let h = g.rms_norm(h, self.p("encoder.final_norm")?)?;
        self.dropout(g, h)
    }

    /// Causal decoder; returns logits `[T, vocab]`.
    pub fn decoder<T: Float>(&mut self, g: &mut Graph<T>, input_ids: &[TokenId], memory: Var, memory_mask: &[bool]) -> Result<Var> {
        if input_ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let m = g.value(memory).rows();
        if m == 0 || memory_mask.len() != m {
            return Err(ModelError::Incompatible(format!("{m} memory rows, {} mask entries", memory_mask.len())));
        }
        if !memory_mask.iter().any(|&v| v) {
            return Err(ModelError::AllMasked);
        }
        let t = input_ids.len();
        let positions: Vec<usize> = (0..t).collect();
        let buckets = bucket_matrix(&positions, &positions, false, self.cfg.num_buckets, self.cfg.max_distance);
        let bias = g.rel_bias(self.p("decoder.rel_bias")?, buckets, t, t)?;
        let self_mask = vec![true; t];
        let x = self.embed(g, input_ids)?;
        let mut h = self.dropout(g, x)?;
        for i in 0..self.cfg.n_dec_layers {
            let layer = format!("decoder.layer.{i}");
            h = self.residual_attention(g, &format!("{layer}.self_attn"), h, None, Some(bias), &self_mask, true)?;
            h = self.residual_attention(g, &format!("{layer}.cross_attn"), h, Some(memory), None, memory_mask, false)?;
            h = self.residual_ffn(g, &layer, h)?;
        }
        let h = g.rms_norm(h, self.p("decoder.final_norm")?)?;
        let h = self.dropout(g, h)?;
        let h = g.scale(h, T::lit((self.cfg.d_model as f64).powf(-0.5)))?;
        Ok(g.matmul_nt(h, self.p("shared.embedding")?)?)
    }
}

/// Encoder stack as a pure function of parameters and input embeddings.
pub fn encoder_forward<T: Float>(
    cfg: &ModelConfig,
    params: &Params<T>,
    input_embeddings: &Tensor<T>,
    position_indices: &[usize],
    attention_mask: &[bool],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = g.bind(params)?;
    let x = g.constant(input_embeddings.clone())?;
    let out = Forward::new(cfg, &b).encoder(&mut g, x, position_indices, attention_mask)?;
    Ok(g.value(out).clone())
}

/// Decoder stack as a pure function; returns logits `[T, vocab]`.
pub fn decoder_forward<T: Float>(
    cfg: &ModelConfig,
    params: &Params<T>,
    decoder_input_ids: &[TokenId],
    encoder_output: &Tensor<T>,
    encoder_mask: &[bool],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = g.bind(params)?;
    let mem = g.constant(encoder_output.clone())?;
    let out = Forward::new(cfg, &b).decoder(&mut g, decoder_input_ids, mem, encoder_mask)?;
    Ok(g.value(out).clone())
}

/// Per-token loss weights `1/count` on unmasked positions, 0 elsewhere.
pub fn token_weights<T: Float>(mask: &[bool], count: usize) -> Vec<T> {
    let w = T::lit(1.0 / count.max(1) as f64);
    mask.iter().map(|&m| if m { w } else { T::zero() }).collect()
}

/// Mean cross-entropy and teacher-forced argmax accuracy over unmasked targets.
pub fn cross_entropy_and_accuracy<T: Float>(logits: &Tensor<T>, targets: &[TokenId], target_mask: &[bool]) -> Result<(f64, f64)> {
    let vocab = logits.last_dim();
    if logits.rows() != targets.len() || target_mask.len() != targets.len() {
        return Err(ModelError::Incompatible(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows(),
            targets.len(),
            target_mask.len()
        )));
    }
    let count = target_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ModelError::NoTargets);
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(ModelError::Incompatible(format!("target {t} outside vocabulary of {vocab}")));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, (&t, _)) in targets.iter().zip(target_mask).enumerate().filter(|(_, (_, &m))| m) {
        let row = logits.row(i);
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[t as usize].to_f64();
        if argmax(row) == t as usize {
            correct += 1;
        }
    }
    Ok((loss / count as f64, correct as f64 / count as f64))
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Targets that count towards loss and accuracy.
pub fn target_mask(targets: &[TokenId]) -> Vec<bool> {
    targets.iter().map(|&t| t != PAD_ID).collect()
}
