//! Corpus loading and the synthetic patterned toy corpus.

use std::path::Path;

use rand::Rng;

use crate::data::vocab::{Vocab, EOS_ID};
use crate::error::{LabError, Result};
use crate::rng::substream;

/// A corpus is a list of byte documents. On disk: plain UTF-8 text,
/// documents separated by blank lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Vec<u8>>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self> {
        let documents: Vec<Vec<u8>> = text
            .split("\n\n")
            .map(|d| d.trim_matches('\n'))
            .filter(|d| !d.is_empty())
            .map(|d| d.as_bytes().to_vec())
            .collect();
        if documents.is_empty() {
            return Err(LabError::InsufficientData("corpus has no documents".into()));
        }
        Ok(Corpus { documents })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Documents joined with eos separators; the single stream every packer
    /// consumes. Each document is followed by one eos token.
    pub fn token_stream(&self, vocab: &Vocab) -> Vec<u32> {
        let mut out = Vec::new();
        for doc in &self.documents {
            out.extend(vocab.tokenize(doc));
            out.push(EOS_ID);
        }
        out
    }

    /// Split off the held-out tail: the last `frac` of the token stream is
    /// validation, never packed into training batches.
    pub fn split_stream(&self, vocab: &Vocab, holdout_frac: f64) -> (Vec<u32>, Vec<u32>) {
        let stream = self.token_stream(vocab);
        let cut = ((stream.len() as f64) * (1.0 - holdout_frac)).floor() as usize;
        let cut = cut.clamp(1, stream.len().saturating_sub(1).max(1));
        let val = stream[cut..].to_vec();
        let mut train = stream;
        train.truncate(cut);
        (train, val)
    }
}

/// The alphabet of the toy grammar.
pub const PATTERN_ALPHABET: &[u8] = b"abcdefgh";
const PATTERN_STRIDES: &[usize] = &[1, 2, 3, 5];

/// A cyclic pattern: characters step through the alphabet with a fixed
/// stride from a starting offset.
pub fn pattern_chars(start: usize, stride: usize, len: usize) -> Vec<u8> {
    (0..len)
        .map(|n| PATTERN_ALPHABET[(start + n * stride) % PATTERN_ALPHABET.len()])
        .collect()
}

/// Deterministic synthetic corpus of repeated cyclic patterns. Next-symbol
/// prediction is exact given two preceding symbols, while the unigram
/// distribution stays near-uniform, so context use is measurable.
pub fn pattern_corpus(seed: u64, n_docs: usize, doc_len: usize) -> Corpus {
    let mut rng = substream(seed, "pattern-corpus", 0);
    let documents = (0..n_docs)
        .map(|_| {
            let start = rng.gen_range(0..PATTERN_ALPHABET.len());
            let stride = PATTERN_STRIDES[rng.gen_range(0..PATTERN_STRIDES.len())];
            pattern_chars(start, stride, doc_len)
        })
        .collect();
    Corpus { documents }
}

/// Entropy (nats) of the empirical unigram distribution of a token stream.
/// The oracle a context-using model must beat.
pub fn unigram_entropy(stream: &[u32]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &t in stream {
        *counts.entry(t).or_insert(0u64) += 1;
    }
    let n = stream.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_line_document_splitting() {
        let c = Corpus::from_text("first doc\nstill first\n\nsecond doc\n\n\nthird").unwrap();
        assert_eq!(c.documents.len(), 3);
        assert_eq!(c.documents[0], b"first doc\nstill first");
        assert_eq!(c.documents[2], b"third");
    }

    #[test]
    fn stream_has_eos_between_documents() {
        let v = Vocab::desk_default();
        let c = Corpus::from_text("ab\n\ncd").unwrap();
        let s = c.token_stream(&v);
        assert_eq!(s.len(), 6);
        assert_eq!(s[2], EOS_ID);
        assert_eq!(s[5], EOS_ID);
    }

    #[test]
    fn pattern_corpus_is_deterministic_and_near_uniform() {
        let a = pattern_corpus(3, 50, 100);
        let b = pattern_corpus(3, 50, 100);
        assert_eq!(a, b);
        let v = Vocab::desk_default();
        let h = unigram_entropy(&a.token_stream(&v));
        // 8 near-uniform symbols plus sparse eos: close to ln 8
        assert!(h > 1.8 && h < 2.3, "unigram entropy {h}");
    }

    #[test]
    fn split_stream_tail_is_held_out() {
        let v = Vocab::desk_default();
        let c = pattern_corpus(1, 20, 50);
        let (train, val) = c.split_stream(&v, 0.02);
        let full = c.token_stream(&v);
        assert_eq!(train.len() + val.len(), full.len());
        assert!(!val.is_empty());
        assert_eq!(&full[train.len()..], val.as_slice());
    }
}
