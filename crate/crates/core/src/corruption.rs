//! Span-corruption and autoencoding example construction.
//!
//! Span corruption removes a few contiguous spans from the input, replacing
//! each with a sentinel. The decoder target lists the removed spans, each
//! introduced by its sentinel, followed by eos.

use std::io::BufRead;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{self, TokenId, EOS_ID, NUM_SENTINELS, PAD_ID};

#[derive(Debug, Error)]
pub enum CorruptionError {
    #[error("sequence of length {0} is too short to corrupt (need at least 2)")]
    TooShort(usize),
    #[error("invalid corruption config: {0}")]
    Config(String),
    #[error("span {index} ({start}..={end}) overlaps or precedes the previous span")]
    Overlap { index: usize, start: usize, end: usize },
    #[error("span {start}..={end} is outside a sequence of length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("{0} spans exceed the {NUM_SENTINELS} available sentinels")]
    TooManySpans(usize),
    #[error("cannot build an example from an empty sequence")]
    Empty,
    #[error("target does not match the corrupted input: {0}")]
    Splice(String),
    #[error("reading corpus: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub noise_density: f64,
    pub mean_span_length: f64,
    pub max_spans: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            noise_density: 0.15,
            mean_span_length: 3.0,
            max_spans: NUM_SENTINELS,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<(), CorruptionError> {
        if !(self.noise_density > 0.0 && self.noise_density < 1.0) {
            return Err(CorruptionError::Config(format!("noise_density {} not in (0, 1)", self.noise_density)));
        }
        if !(self.mean_span_length >= 1.0) {
            return Err(CorruptionError::Config(format!("mean_span_length {} < 1", self.mean_span_length)));
        }
        if self.max_spans == 0 || self.max_spans > NUM_SENTINELS {
            return Err(CorruptionError::Config(format!("max_spans {} not in 1..={NUM_SENTINELS}", self.max_spans)));
        }
        Ok(())
    }

    /// `(noise tokens, span count)` for a sequence of length `n ≥ 2`.
    pub fn budget(&self, n: usize) -> (usize, usize) {
        let noise = ((n as f64 * self.noise_density).round_ties_even() as usize).clamp(1, n - 1);
        let spans = ((noise as f64 / self.mean_span_length).round_ties_even() as usize)
            .max(1)
            .min(self.max_spans)
            .min(noise)
            // inner non-noise gaps need at least one token each
            .min(n - noise + 1);
        (noise, spans)
    }
}

/// Inclusive token range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Encoder/decoder token triple used for every seq2seq objective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionExample {
    pub encoder_tokens: Vec<TokenId>,
    /// `pad ⊕ decoder_target[..len-1]`.
    pub decoder_input: Vec<TokenId>,
    pub decoder_target: Vec<TokenId>,
}

impl CorruptionExample {
    /// Example whose target is `target ⊕ eos`, teacher-forced with a
    /// pad-started shifted copy.
    pub fn seq2seq(input: Vec<TokenId>, target: &[TokenId]) -> Self {
        let mut decoder_target = target.to_vec();
        decoder_target.push(EOS_ID);
        Self {
            decoder_input: shift_right(&decoder_target),
            encoder_tokens: input,
            decoder_target,
        }
    }
}

pub fn shift_right(target: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(target.len());
    if !target.is_empty() {
        v.push(PAD_ID);
        v.extend_from_slice(&target[..target.len() - 1]);
    }
    v
}

/// Random composition of `total` into `parts` positive integers.
fn positive_composition(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(parts >= 1 && total >= parts);
    let mut cuts = sample(rng, total - 1, parts - 1).into_vec();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c + 1 - prev);
        prev = c + 1;
    }
    out.push(total - prev);
    out
}

/// Samples disjoint, non-adjacent noise spans.
///
/// Noise tokens are split into `spans` random positive lengths; the clean
/// tokens are split into `spans + 1` gaps whose interior members are
/// positive and whose two outer members may be empty, so spans may touch
/// either sequence edge.
pub fn sample_spans(n: usize, cfg: &CorruptionConfig, rng: &mut impl Rng) -> Result<Vec<Span>, CorruptionError> {
    if n < 2 {
        return Err(CorruptionError::TooShort(n));
    }
    cfg.validate()?;
    let (noise, spans) = cfg.budget(n);
    let noise_lens = positive_composition(noise, spans, rng);
    // Compose clean + 2 into spans+1 positive parts, then trim the outer gaps by one.
    let mut gaps = positive_composition(n - noise + 2, spans + 1, rng);
    gaps[0] -= 1;
    *gaps.last_mut().expect("spans + 1 gaps") -= 1;
    let mut out = Vec::with_capacity(spans);
    let mut pos = 0;
    for (gap, len) in gaps.iter().zip(&noise_lens) {
        pos += gap;
        out.push(Span::new(pos, pos + len - 1));
        pos += len;
    }
    Ok(out)
}

fn merged_spans(n: usize, spans: &[Span]) -> Result<Vec<Span>, CorruptionError> {
    let mut merged: Vec<Span> = Vec::with_capacity(spans.len());
    for (i, s) in spans.iter().enumerate() {
        if s.start > s.end || s.end >= n {
            return Err(CorruptionError::OutOfRange {
                start: s.start,
                end: s.end,
                len: n,
            });
        }
        match merged.last_mut() {
            Some(prev) if s.start <= prev.end => {
                return Err(CorruptionError::Overlap {
                    index: i,
                    start: s.start,
                    end: s.end,
                })
            }
            Some(prev) if s.start == prev.end + 1 => prev.end = s.end,
            _ => merged.push(*s),
        }
    }
    if merged.len() > NUM_SENTINELS {
        return Err(CorruptionError::TooManySpans(merged.len()));
    }
    Ok(merged)
}

/// Replaces span `i` by sentinel `i` in the encoder input and moves the
/// removed tokens, sentinel-delimited, into the decoder target.
pub fn corrupt(tokens: &[TokenId], spans: &[Span]) -> Result<CorruptionExample, CorruptionError> {
    let spans = merged_spans(tokens.len(), spans)?;
    let mut encoder = Vec::with_capacity(tokens.len());
    let mut target = Vec::new();
    let mut cursor = 0;
    for (i, s) in spans.iter().enumerate() {
        let sent = tokenizer::sentinel(i).expect("span count checked");
        encoder.extend_from_slice(&tokens[cursor..s.start]);
        encoder.push(sent);
        target.push(sent);
        target.extend_from_slice(&tokens[s.start..=s.end]);
        cursor = s.end + 1;
    }
    encoder.extend_from_slice(&tokens[cursor..]);
    target.push(EOS_ID);
    Ok(CorruptionExample {
        decoder_input: shift_right(&target),
        encoder_tokens: encoder,
        decoder_target: target,
    })
}

/// Samples spans and corrupts in one go.
pub fn span_corruption_example(
    tokens: &[TokenId],
    cfg: &CorruptionConfig,
    rng: &mut impl Rng,
) -> Result<CorruptionExample, CorruptionError> {
    let spans = sample_spans(tokens.len(), cfg, rng)?;
    corrupt(tokens, &spans)
}

pub fn autoencode_example(tokens: &[TokenId]) -> Result<CorruptionExample, CorruptionError> {
    if tokens.is_empty() {
        return Err(CorruptionError::Empty);
    }
    Ok(CorruptionExample::seq2seq(tokens.to_vec(), tokens))
}

/// Splices the spans of a span-corruption target back into its encoder input.
pub fn reconstruct(encoder: &[TokenId], target: &[TokenId]) -> Result<Vec<TokenId>, CorruptionError> {
    let body = match target.split_last() {
        Some((&EOS_ID, body)) => body,
        _ => return Err(CorruptionError::Splice("target does not end with eos".into())),
    };
    // Group target tokens by the sentinel introducing them.
    let mut spans: Vec<(TokenId, &[TokenId])> = Vec::new();
    let mut i = 0;
    while i < body.len() {
        let sent = body[i];
        if !tokenizer::is_sentinel(sent) {
            return Err(CorruptionError::Splice(format!("expected sentinel at target position {i}")));
        }
        let end = body[i + 1..]
            .iter()
            .position(|&t| tokenizer::is_sentinel(t))
            .map_or(body.len(), |p| i + 1 + p);
        spans.push((sent, &body[i + 1..end]));
        i = end;
    }
    let mut next = spans.iter();
    let mut out = Vec::with_capacity(encoder.len() + body.len());
    for &t in encoder {
        if tokenizer::is_sentinel(t) {
            match next.next() {
                Some(&(s, toks)) if s == t => out.extend_from_slice(toks),
                _ => return Err(CorruptionError::Splice(format!("sentinel {t} has no matching span"))),
            }
        } else {
            out.push(t);
        }
    }
    if next.next().is_some() {
        return Err(CorruptionError::Splice("target has unused spans".into()));
    }
    Ok(out)
}

/// Reads a newline-delimited UTF-8 corpus, one document per non-empty line.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<TokenId>>, CorruptionError> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.is_empty() {
            docs.push(tokenizer::encode(line.as_bytes()));
        }
    }
    Ok(docs)
}
