//! DeCAL: a compressive encoder for T5-style encoder-decoder transformers.
//!
//! The encoder prepends a latent sequence, one latent per window of `C`
//! input tokens, runs the unmodified transformer encoder over both, and
//! emits only the latent rows. Around that mechanism this crate provides a
//! byte tokenizer, span-corruption data, training loops with checkpointing,
//! and multi-vector retrieval over stores of compressed passages.

pub mod tensor;
pub mod tokenizer;
pub mod corruption;
pub mod model;
pub mod encoder;
pub mod train;
pub mod retrieval;
pub mod diagnostics;
