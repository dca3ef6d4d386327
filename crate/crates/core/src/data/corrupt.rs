//! Span corruption: mask contiguous spans, emit sentinel-delimited targets.
//!
//! Procedure: the masked budget is `round(rate·len)` tokens split into
//! `max(1, round(rate·len/mean_span))` spans by a random composition (each
//! span ≥ 1 token), placed uniformly at non-adjacent, non-overlapping
//! positions. Span k is replaced in the input by sentinel k; targets are
//! each sentinel followed by the span it hid, closed by one final sentinel.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::vocab::Vocab;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedExample {
    pub corrupted_input: Vec<u32>,
    pub targets: Vec<u32>,
    pub n_masked: usize,
}

fn masked_budget(len: usize, mask_rate: f64) -> usize {
    ((mask_rate * len as f64).round() as usize).max(1)
}

fn span_count(len: usize, mask_rate: f64, mean_span: f64) -> usize {
    let s = (mask_rate * len as f64 / mean_span).round() as usize;
    s.max(1)
}

/// Random composition of `total` into `parts` pieces, each ≥ 1.
fn compose(total: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(parts >= 1 && total >= parts);
    if parts == 1 {
        return vec![total];
    }
    // choose parts-1 distinct cut points in [1, total-1]
    let mut cuts: Vec<usize> = (1..total).collect();
    cuts.shuffle(rng);
    cuts.truncate(parts - 1);
    cuts.sort_unstable();
    let mut lengths = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        lengths.push(c - prev);
        prev = c;
    }
    lengths.push(total - prev);
    lengths
}

/// Choose `k` distinct values from `0..=max` (sorted).
fn choose_gaps(k: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..=max).collect();
    all.shuffle(rng);
    all.truncate(k);
    all.sort_unstable();
    all
}

pub fn corrupt_spans(
    tokens: &[u32],
    mask_rate: f64,
    mean_span: f64,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<CorruptedExample> {
    let n = tokens.len();
    if (n as f64) < 2.0 * mean_span {
        return Err(LabError::InsufficientData(format!(
            "sequence of {n} tokens too short to corrupt (mean span {mean_span})"
        )));
    }
    let budget = masked_budget(n, mask_rate);
    // spec leaves the budget < span-count corner open; clamp so every span
    // keeps at least one token
    let n_spans = span_count(n, mask_rate, mean_span).min(budget);
    if n_spans + 1 > vocab.n_sentinels {
        return Err(LabError::InvalidConfig(format!(
            "{n_spans} spans need {} sentinels, vocab has {}",
            n_spans + 1,
            vocab.n_sentinels
        )));
    }
    let unmasked = n - budget;
    if n_spans > unmasked + 1 {
        return Err(LabError::TooDenseToCorrupt {
            needed: n_spans,
            available: unmasked + 1,
        });
    }
    let lengths = compose(budget, n_spans, rng);
    let gaps = choose_gaps(n_spans, unmasked, rng);

    // span k covers original[start_k .. start_k + len_k) with
    // start_k = gaps[k] + Σ_{j<k} lengths[j]
    let mut corrupted_input = Vec::with_capacity(n - budget + n_spans);
    let mut targets = Vec::with_capacity(budget + n_spans + 1);
    let mut pos = 0usize;
    let mut consumed_span = 0usize;
    for (k, (&gap, &len)) in gaps.iter().zip(&lengths).enumerate() {
        let start = gap + consumed_span;
        corrupted_input.extend_from_slice(&tokens[pos..start]);
        corrupted_input.push(vocab.sentinel(k));
        targets.push(vocab.sentinel(k));
        targets.extend_from_slice(&tokens[start..start + len]);
        pos = start + len;
        consumed_span += len;
    }
    corrupted_input.extend_from_slice(&tokens[pos..]);
    targets.push(vocab.sentinel(n_spans));
    Ok(CorruptedExample {
        corrupted_input,
        targets,
        n_masked: budget,
    })
}

/// Substitutes each sentinel in the corrupted input with its target span;
/// must reproduce the original sequence exactly.
pub fn reconstruct(example: &CorruptedExample, vocab: &Vocab) -> Vec<u32> {
    // split targets into spans keyed by sentinel index
    let mut spans: Vec<Vec<u32>> = Vec::new();
    for &t in &example.targets {
        if vocab.is_sentinel(t) {
            spans.push(Vec::new());
        } else if let Some(last) = spans.last_mut() {
            last.push(t);
        }
    }
    let mut out = Vec::new();
    for &t in &example.corrupted_input {
        match vocab.sentinel_index(t) {
            Some(k) => out.extend_from_slice(&spans[k]),
            None => out.push(t),
        }
    }
    out
}

/// Largest raw sequence length whose corrupted input plus targets fit a
/// per-example budget of `budget` positions (the tokens-seen accounting
/// unit): `len + 2·span_count(len) + 1 ≤ budget`.
pub fn raw_len_for_budget(budget: usize, mask_rate: f64, mean_span: f64) -> Result<usize> {
    let fits = |len: usize| {
        let s = span_count(len, mask_rate, mean_span).min(masked_budget(len, mask_rate));
        len + 2 * s + 1 <= budget
    };
    (1..=budget)
        .rev()
        .find(|&l| fits(l))
        .ok_or_else(|| LabError::InvalidConfig(format!("budget {budget} too small for corruption")))
}
