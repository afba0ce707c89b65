use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tokenizer::VOCAB_SIZE;

/// Which encoder produces the representation handed to the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Plain T5 encoder, one output row per input token.
    Baseline,
    /// Latents prepended to the input; only latent rows are emitted.
    Decal,
    /// Plain encoder followed by one attention-pooling layer (stride 2).
    Attnpool,
}

impl std::fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderMode::Baseline => "baseline",
            EncoderMode::Decal => "decal",
            EncoderMode::Attnpool => "attnpool",
        })
    }
}

impl std::str::FromStr for EncoderMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "decal" => Ok(Self::Decal),
            "attnpool" => Ok(Self::Attnpool),
            other => Err(ModelError::Config(format!("unknown encoder mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_kv: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub compression_ratio: usize,
    pub encoder_mode: EncoderMode,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_kv: 16,
            d_ff: 256,
            n_enc_layers: 4,
            n_dec_layers: 4,
            vocab_size: VOCAB_SIZE,
            num_buckets: 128,
            max_distance: 512,
            compression_ratio: 2,
            encoder_mode: EncoderMode::Decal,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks: 2+2 layers, width 16.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            d_kv: 8,
            d_ff: 32,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: EncoderMode, compression: usize) -> Self {
        self.encoder_mode = mode;
        self.compression_ratio = compression;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_kv == 0 || self.d_ff == 0 {
            return bad("widths must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_kv {
            return bad(format!(
                "d_model {} != n_heads {} * d_kv {}",
                self.d_model, self.n_heads, self.d_kv
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if self.vocab_size < VOCAB_SIZE {
            return bad(format!("vocab_size {} < tokenizer vocabulary {VOCAB_SIZE}", self.vocab_size));
        }
        if self.num_buckets < 4 || self.num_buckets % 2 != 0 {
            return bad(format!("num_buckets {} must be even and at least 4", self.num_buckets));
        }
        if self.max_distance <= self.num_buckets {
            return bad(format!(
                "max_distance {} must exceed num_buckets {}",
                self.max_distance, self.num_buckets
            ));
        }
        if self.compression_ratio == 0 {
            return bad("compression_ratio must be at least 1".into());
        }
        match self.encoder_mode {
            EncoderMode::Baseline if self.compression_ratio != 1 => {
                return bad("baseline encoder requires compression_ratio 1".into())
            }
            EncoderMode::Attnpool if self.compression_ratio != 2 => {
                return bad("attnpool encoder requires compression_ratio 2".into())
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}
