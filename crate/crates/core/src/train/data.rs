//! Synthetic corpora and example builders.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Task, TrainError};
use crate::corruption::{autoencode_example, span_corruption_example, CorruptionConfig, CorruptionExample};
use crate::tokenizer::{TokenId, BYTE_OFFSET};

/// Tokens for the bytes `a`, `b`, ... drawn uniformly from the first
/// `alphabet` lowercase letters (or bytes above `a` for larger alphabets).
pub fn random_tokens(len: usize, alphabet: usize, rng: &mut impl Rng) -> Vec<TokenId> {
    let alphabet = alphabet.clamp(1, 256 - b'a' as usize);
    (0..len)
        .map(|_| BYTE_OFFSET + b'a' as TokenId + rng.gen_range(0..alphabet) as TokenId)
        .collect()
}

/// Documents made of a random key written twice, so any removed token can
/// be recovered from the other copy.
pub fn repeat_corpus(docs: usize, key_len: usize, alphabet: usize, rng: &mut impl Rng) -> Vec<Vec<TokenId>> {
    (0..docs)
        .map(|_| {
            let key = random_tokens(key_len, alphabet, rng);
            key.iter().chain(&key).copied().collect()
        })
        .collect()
}

/// Word-like text: a random lexicon of `lexicon` lowercase words (3 to 6
/// letters), each word followed by one of `successors` fixed next words.
/// Documents are space-separated walks of at least `min_len` tokens.
pub fn lexicon_corpus(docs: usize, min_len: usize, lexicon: usize, successors: usize, rng: &mut impl Rng) -> Vec<Vec<TokenId>> {
    let words: Vec<Vec<TokenId>> = (0..lexicon.max(1))
        .map(|_| {
            let len = rng.gen_range(3..=6);
            random_tokens(len, 26, rng)
        })
        .collect();
    let next: Vec<Vec<usize>> = (0..words.len())
        .map(|_| (0..successors.max(1)).map(|_| rng.gen_range(0..words.len())).collect())
        .collect();
    let space = BYTE_OFFSET + b' ' as TokenId;
    (0..docs)
        .map(|_| {
            let mut w = rng.gen_range(0..words.len());
            let mut doc = words[w].clone();
            while doc.len() < min_len {
                w = next[w][rng.gen_range(0..next[w].len())];
                doc.push(space);
                doc.extend_from_slice(&words[w]);
            }
            doc
        })
        .collect()
}

/// Reverse-the-sequence pairs.
pub fn reverse_examples(n: usize, len: usize, alphabet: usize, rng: &mut impl Rng) -> Vec<CorruptionExample> {
    (0..n)
        .map(|_| {
            let seq = random_tokens(len, alphabet, rng);
            let rev: Vec<TokenId> = seq.iter().rev().copied().collect();
            CorruptionExample::seq2seq(seq, &rev)
        })
        .collect()
}

/// Crops `doc` to at most `len` tokens at a random offset.
pub fn crop<'a>(doc: &'a [TokenId], len: usize, rng: &mut impl Rng) -> &'a [TokenId] {
    if doc.len() <= len {
        return doc;
    }
    let start = rng.gen_range(0..=doc.len() - len);
    &doc[start..start + len]
}

/// Builds one pretraining example for `task` from a document.
pub fn make_example(
    task: Task,
    doc: &[TokenId],
    corruption: &CorruptionConfig,
    rng: &mut impl Rng,
) -> Result<CorruptionExample, TrainError> {
    match task {
        Task::SpanCorruption => Ok(span_corruption_example(doc, corruption, rng)?),
        Task::Autoencode => Ok(autoencode_example(doc)?),
        other => Err(TrainError::Config(format!("task {other} does not build examples from raw documents"))),
    }
}

/// Corrupts each document once, giving a fixed example set.
pub fn fixed_examples(
    task: Task,
    docs: &[Vec<TokenId>],
    corruption: &CorruptionConfig,
    rng: &mut impl Rng,
) -> Result<Vec<CorruptionExample>, TrainError> {
    docs.iter().map(|d| make_example(task, d, corruption, rng)).collect()
}

/// Endless shuffled passes over `0..n`.
pub struct EpochSampler {
    order: Vec<usize>,
    next: usize,
}

impl EpochSampler {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            next: n,
        }
    }

    pub fn batch(&mut self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.next == self.order.len() {
                    self.order.shuffle(rng);
                    self.next = 0;
                }
                self.next += 1;
                self.order[self.next - 1]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn repeat_docs_repeat() {
        let docs = repeat_corpus(3, 5, 4, &mut ChaCha8Rng::seed_from_u64(0));
        for d in docs {
            assert_eq!(d.len(), 10);
            assert_eq!(d[..5], d[5..]);
        }
    }

    #[test]
    fn epochs_cover_everything() {
        let mut s = EpochSampler::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = s.batch(5, &mut rng);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn reverse_pairs() {
        let ex = &reverse_examples(1, 4, 3, &mut ChaCha8Rng::seed_from_u64(2))[0];
        let mut rev = ex.encoder_tokens.clone();
        rev.reverse();
        assert_eq!(ex.decoder_target[..4], rev[..]);
    }
}
