//! Byte-level reversible tokenizer with reserved sentinel ids.
//!
//! Layout: id 0 = pad, id 1 = eos, ids 2..258 = raw bytes, and the top
//! `n_sentinels` ids are span-corruption sentinels (ascending: sentinel k is
//! `size - n_sentinels + k`). Sentinels never appear in tokenized text.
//! Vocabulary size is configurable so parameter-count checks can use the
//! full-scale figure while training runs stay small.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const BYTE_OFFSET: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub n_sentinels: usize,
}

impl Vocab {
    pub fn new(size: usize, n_sentinels: usize) -> Result<Self> {
        if size < 256 + n_sentinels + 2 {
            return Err(LabError::InvalidConfig(format!(
                "vocab size {size} too small for 256 bytes + {n_sentinels} sentinels + pad/eos"
            )));
        }
        Ok(Vocab { size, n_sentinels })
    }

    /// Desk-scale default: 512 ids, 64 sentinels.
    pub fn desk_default() -> Self {
        Vocab {
            size: 512,
            n_sentinels: 64,
        }
    }

    pub fn sentinel(&self, k: usize) -> u32 {
        assert!(k < self.n_sentinels, "sentinel {k} out of range");
        (self.size - self.n_sentinels + k) as u32
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        (id as usize) >= self.size - self.n_sentinels && (id as usize) < self.size
    }

    pub fn sentinel_index(&self, id: u32) -> Option<usize> {
        self.is_sentinel(id)
            .then(|| id as usize - (self.size - self.n_sentinels))
    }

    pub fn tokenize(&self, text: &[u8]) -> Vec<u32> {
        text.iter().map(|&b| b as u32 + BYTE_OFFSET).collect()
    }

    /// Inverse of [`Vocab::tokenize`]; non-byte ids (pad, eos, sentinels)
    /// are skipped.
    pub fn detokenize(&self, tokens: &[u32]) -> Vec<u8> {
        tokens
            .iter()
            .filter(|&&t| (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&t))
            .map(|&t| (t - BYTE_OFFSET) as u8)
            .collect()
    }
}
