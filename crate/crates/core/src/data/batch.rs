//! The batch currency between the data pipelines and the model.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Token id 0 is padding in every stream.
pub const PAD: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObjectiveKind {
    Flm,
    Plm,
    Mlm { mask_rate: f64, mean_span: f64 },
}

impl ObjectiveKind {
    pub fn mlm_default() -> Self {
        ObjectiveKind::Mlm {
            mask_rate: 0.15,
            mean_span: 3.0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ObjectiveKind::Flm => "FLM",
            ObjectiveKind::Plm => "PLM",
            ObjectiveKind::Mlm { .. } => "MLM",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ObjectiveKind::Mlm {
            mask_rate,
            mean_span,
        } = self
        {
            if !(*mask_rate > 0.0 && *mask_rate < 1.0) {
                return Err(LabError::InvalidConfig("mask_rate must be in (0,1)".into()));
            }
            if *mean_span < 1.0 {
                return Err(LabError::InvalidConfig("mean_span must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Encoder-side token streams, present only for encoder-decoder batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderStreams {
    pub seq_len: usize,
    /// [rows × seq_len]
    pub input_ids: Vec<u32>,
    /// [rows × seq_len], 0 = pad
    pub segment_ids: Vec<u32>,
}

/// Token ids plus loss and visibility metadata for one training step.
///
/// All matrices are row-major [rows × seq_len]. `target_ids[p]` is the token
/// the model should predict at position `p`; positions with `loss_mask`
/// false carry PAD targets. `prefix_lens`, present for non-causal batches,
/// holds one prefix length per segment per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub seq_len: usize,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub segment_ids: Vec<u32>,
    pub prefix_lens: Option<Vec<Vec<usize>>>,
    pub encoder: Option<EncoderStreams>,
    pub objective: ObjectiveKind,
}

impl PackedBatch {
    pub fn rows(&self) -> usize {
        if self.seq_len == 0 {
            0
        } else {
            self.input_ids.len() / self.seq_len
        }
    }

    pub fn row_inputs(&self, r: usize) -> &[u32] {
        &self.input_ids[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn row_segments(&self, r: usize) -> &[u32] {
        &self.segment_ids[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn row_targets(&self, r: usize) -> &[u32] {
        &self.target_ids[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn row_loss_mask(&self, r: usize) -> &[bool] {
        &self.loss_mask[r * self.seq_len..(r + 1) * self.seq_len]
    }

    /// Structural invariants every pipeline must uphold.
    pub fn validate(&self) -> Result<()> {
        let n = self.input_ids.len();
        if self.target_ids.len() != n || self.loss_mask.len() != n || self.segment_ids.len() != n {
            return Err(LabError::InvalidConfig("batch field lengths differ".into()));
        }
        if self.seq_len == 0 || n % self.seq_len != 0 {
            return Err(LabError::InvalidConfig("batch not divisible into rows".into()));
        }
        for i in 0..n {
            if self.loss_mask[i] && self.target_ids[i] == PAD {
                return Err(LabError::InvalidConfig(format!(
                    "loss-masked-in position {i} has a pad target"
                )));
            }
        }
        if let Some(pl) = &self.prefix_lens {
            if pl.len() != self.rows() {
                return Err(LabError::InvalidConfig("prefix_lens rows mismatch".into()));
            }
        }
        if let Some(enc) = &self.encoder {
            if enc.seq_len == 0 || enc.input_ids.len() != self.rows() * enc.seq_len {
                return Err(LabError::InvalidConfig("encoder stream shape mismatch".into()));
            }
            if enc.segment_ids.len() != enc.input_ids.len() {
                return Err(LabError::InvalidConfig("encoder segments mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Per-row debug record for the line-delimited dump format.
#[derive(Debug, Serialize, Deserialize)]
struct BatchRowRecord {
    input_ids: Vec<u32>,
    target_ids: Vec<u32>,
    loss_mask: Vec<u8>,
    segment_ids: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prefix_lens: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    encoder_ids: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    encoder_segments: Option<Vec<u32>>,
    objective: ObjectiveKind,
}

/// Writes one JSON record per row; integers only, so output is bit-exact
/// across platforms.
pub fn dump_batch(batch: &PackedBatch, mut w: impl Write) -> Result<()> {
    for r in 0..batch.rows() {
        let rec = BatchRowRecord {
            input_ids: batch.row_inputs(r).to_vec(),
            target_ids: batch.row_targets(r).to_vec(),
            loss_mask: batch.row_loss_mask(r).iter().map(|b| *b as u8).collect(),
            segment_ids: batch.row_segments(r).to_vec(),
            prefix_lens: batch.prefix_lens.as_ref().map(|pl| pl[r].clone()),
            encoder_ids: batch.encoder.as_ref().map(|e| {
                e.input_ids[r * e.seq_len..(r + 1) * e.seq_len].to_vec()
            }),
            encoder_segments: batch.encoder.as_ref().map(|e| {
                e.segment_ids[r * e.seq_len..(r + 1) * e.seq_len].to_vec()
            }),
            objective: batch.objective,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a dump produced by [`dump_batch`] back into a batch.
pub fn parse_batch_dump(r: impl BufRead) -> Result<PackedBatch> {
    let mut rows: Vec<BatchRowRecord> = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    if rows.is_empty() {
        return Err(LabError::InsufficientData("empty batch dump".into()));
    }
    let seq_len = rows[0].input_ids.len();
    let objective = rows[0].objective;
    let has_prefix = rows[0].prefix_lens.is_some();
    let enc_len = rows[0].encoder_ids.as_ref().map(|e| e.len());
    let mut batch = PackedBatch {
        seq_len,
        input_ids: Vec::new(),
        target_ids: Vec::new(),
        loss_mask: Vec::new(),
        segment_ids: Vec::new(),
        prefix_lens: has_prefix.then(Vec::new),
        encoder: enc_len.map(|l| EncoderStreams {
            seq_len: l,
            input_ids: Vec::new(),
            segment_ids: Vec::new(),
        }),
        objective,
    };
    for rec in rows {
        batch.input_ids.extend(rec.input_ids);
        batch.target_ids.extend(rec.target_ids);
        batch.loss_mask.extend(rec.loss_mask.iter().map(|b| *b != 0));
        batch.segment_ids.extend(rec.segment_ids);
        if let (Some(pl), Some(p)) = (batch.prefix_lens.as_mut(), rec.prefix_lens) {
            pl.push(p);
        }
        if let (Some(enc), Some(ids)) = (batch.encoder.as_mut(), rec.encoder_ids) {
            enc.input_ids.extend(ids);
            enc.segment_ids.extend(rec.encoder_segments.unwrap_or_default());
        }
    }
    batch.validate()?;
    Ok(batch)
}
