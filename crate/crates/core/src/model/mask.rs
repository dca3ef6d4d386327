//! Attention visibility construction.
//!
//! Three base patterns: causal (each position sees itself and the past),
//! prefix (a leading region is fully bidirectional, causal elsewhere), and
//! full. Segment ids, when present, additionally isolate packed examples
//! from each other.

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Prefix,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub target_len: usize,
    pub source_len: usize,
    /// Row-major [target_len × source_len].
    pub visibility: Vec<bool>,
    pub kind: MaskKind,
    pub prefix_len: Option<usize>,
}

impl AttentionMask {
    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.visibility[i * self.source_len + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.visibility[i * self.source_len..(i + 1) * self.source_len]
    }
}

/// Builds a square self-attention mask.
///
/// `prefix_len` is required exactly when `kind` is `Prefix` and must lie in
/// `[0, seq_len]`. When `segment_ids` are given, visibility additionally
/// requires equal segment ids (ids are opaque labels here).
pub fn build_mask(
    kind: MaskKind,
    seq_len: usize,
    prefix_len: Option<usize>,
    segment_ids: Option<&[u32]>,
) -> Result<AttentionMask> {
    match kind {
        MaskKind::Prefix => {
            let p = prefix_len.ok_or_else(|| {
                LabError::InvalidConfig("prefix mask requires prefix_len".into())
            })?;
            if p > seq_len {
                return Err(LabError::InvalidConfig(format!(
                    "prefix_len {p} out of range [0, {seq_len}]"
                )));
            }
        }
        _ => {
            if prefix_len.is_some() {
                return Err(LabError::InvalidConfig(
                    "prefix_len only applies to prefix masks".into(),
                ));
            }
        }
    }
    if let Some(segs) = segment_ids {
        if segs.len() != seq_len {
            return Err(LabError::ShapeMismatch {
                context: "build_mask segment_ids".into(),
                lhs: vec![seq_len],
                rhs: vec![segs.len()],
            });
        }
    }
    let mut visibility = vec![false; seq_len * seq_len];
    for i in 0..seq_len {
        for j in 0..seq_len {
            let base = match kind {
                MaskKind::Causal => j <= i,
                MaskKind::Prefix => j < prefix_len.unwrap() || j <= i,
                MaskKind::Full => true,
            };
            let seg_ok = segment_ids.map_or(true, |s| s[i] == s[j]);
            visibility[i * seq_len + j] = base && seg_ok;
        }
    }
    Ok(AttentionMask {
        target_len: seq_len,
        source_len: seq_len,
        visibility,
        kind,
        prefix_len,
    })
}

/// Per-row visibility for packed decoder rows.
///
/// `segments[i] == 0` marks padding: pad positions see only themselves (so
/// softmax rows stay well-formed) and nothing sees them. `prefix_lens`, when
/// present, holds one prefix length per real segment in order of appearance
/// (segment id `s` reads `prefix_lens[s-1]`); positions whose local index is
/// below their segment's prefix are bidirectional within the segment.
///
/// Returns (visibility [seq×seq], bidirectional flag per position).
pub fn packed_row_visibility(
    segments: &[u32],
    prefix_lens: Option<&[usize]>,
) -> (Vec<bool>, Vec<bool>) {
    let n = segments.len();
    // local index of each position within its segment
    let mut local = vec![0usize; n];
    let mut counts: Vec<usize> = Vec::new();
    for (i, &s) in segments.iter().enumerate() {
        if s == 0 {
            continue;
        }
        let s = s as usize;
        if counts.len() < s {
            counts.resize(s, 0);
        }
        local[i] = counts[s - 1];
        counts[s - 1] += 1;
    }
    let in_prefix = |i: usize| -> bool {
        let s = segments[i];
        if s == 0 {
            return false;
        }
        match prefix_lens {
            Some(pl) => local[i] < pl[(s - 1) as usize],
            None => false,
        }
    };
    let bidir: Vec<bool> = (0..n).map(in_prefix).collect();
    let mut vis = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = if segments[i] == 0 || segments[j] == 0 {
                i == j
            } else if segments[i] != segments[j] {
                false
            } else {
                bidir[j] || local[j] <= local[i]
            };
            vis[i * n + j] = v;
        }
    }
    (vis, bidir)
}

/// Cross-attention visibility: decoder position i sees encoder position j
/// iff both are real and share a segment id.
pub fn cross_visibility(dec_segments: &[u32], enc_segments: &[u32]) -> Vec<bool> {
    let (t, s) = (dec_segments.len(), enc_segments.len());
    let mut vis = vec![false; t * s];
    for i in 0..t {
        for j in 0..s {
            vis[i * s + j] = dec_segments[i] != 0 && dec_segments[i] == enc_segments[j];
        }
    }
    vis
}

/// Encoder self-attention: full within segments, pads self-only.
pub fn encoder_visibility(segments: &[u32]) -> Vec<bool> {
    let n = segments.len();
    let mut vis = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            vis[i * n + j] = if segments[i] == 0 || segments[j] == 0 {
                i == j
            } else {
                segments[i] == segments[j]
            };
        }
    }
    vis
}
