//! Byte-level vocabulary with pad, eos and sentinel tokens.
//!
//! | ids       | meaning              |
//! |-----------|----------------------|
//! | 0         | pad                  |
//! | 1         | eos                  |
//! | 2..=257   | byte `b` → `b + 2`   |
//! | 258..=321 | sentinel `k` → `258 + k` |

use thiserror::Error;

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const BYTE_OFFSET: TokenId = 2;
pub const NUM_SENTINELS: usize = 64;
pub const FIRST_SENTINEL: TokenId = 258;
pub const VOCAB_SIZE: usize = 322;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token id {0} is outside the vocabulary of {VOCAB_SIZE}")]
    OutOfVocab(TokenId),
    #[error("sentinel index {0} exceeds the {NUM_SENTINELS} available sentinels")]
    SentinelRange(usize),
}

/// What an id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Pad,
    Eos,
    Byte(u8),
    Sentinel(usize),
}

pub fn classify(id: TokenId) -> Result<Token, TokenizerError> {
    match id {
        PAD_ID => Ok(Token::Pad),
        EOS_ID => Ok(Token::Eos),
        2..=257 => Ok(Token::Byte((id - BYTE_OFFSET) as u8)),
        258..=321 => Ok(Token::Sentinel((id - FIRST_SENTINEL) as usize)),
        _ => Err(TokenizerError::OutOfVocab(id)),
    }
}

pub fn sentinel(k: usize) -> Result<TokenId, TokenizerError> {
    if k >= NUM_SENTINELS {
        return Err(TokenizerError::SentinelRange(k));
    }
    Ok(FIRST_SENTINEL + k as TokenId)
}

pub fn is_sentinel(id: TokenId) -> bool {
    (FIRST_SENTINEL..FIRST_SENTINEL + NUM_SENTINELS as TokenId).contains(&id)
}

pub fn encode(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| b as TokenId + BYTE_OFFSET).collect()
}

/// Bytes back out; pad and eos vanish, sentinel `k` renders as `<X_k>`.
pub fn decode(ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match classify(id)? {
            Token::Pad | Token::Eos => {}
            Token::Byte(b) => out.push(b),
            Token::Sentinel(k) => out.extend_from_slice(format!("<X_{k}>").as_bytes()),
        }
    }
    Ok(out)
}
