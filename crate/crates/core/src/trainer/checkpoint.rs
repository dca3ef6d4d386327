//! Checkpoint format: one file, a JSON header line, then length-prefixed raw
//! little-endian parameter blobs in sorted path order. High-precision params
//! serialize as f64 bytes, low-precision as f32 (exact, since low-precision
//! tensors are f32-valued by construction). Optimizer state rides in the
//! header; serde_json round-trips every finite f64 bit-exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocab;
use crate::error::{LabError, Result};
use crate::model::config::{ArchitectureKind, ModelConfig};
use crate::model::params::ParamTree;
use crate::optim::OptimizerState;
use crate::tensor::{Precision, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub arch: ArchitectureKind,
    pub objective: String,
    pub tokens_seen: u64,
    pub tokens_trained: u64,
    pub steps: u64,
    pub final_val_loss: Option<f64>,
}

impl StageSummary {
    /// "CD:FLM (1.2M)"-style label.
    pub fn label(&self) -> String {
        format!(
            "{}:{} ({})",
            self.arch.label(),
            self.objective,
            self.tokens_seen
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: ArchitectureKind,
    /// Objective label of the most recent stage, if any.
    pub objective: Option<String>,
    pub cumulative_tokens_seen: u64,
    pub cumulative_tokens_trained: u64,
    pub stage_history: Vec<StageSummary>,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub precision: Precision,
    /// Experimental encoder-decoder → causal-decoder routing: batches carry
    /// a stub encoder stream and the full ED parameter tree stays live.
    pub empty_encoder: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamTree,
    pub optimizer_state: Option<OptimizerState>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Fresh initialization with an empty stage history.
    pub fn fresh(
        config: &ModelConfig,
        arch: ArchitectureKind,
        vocab: Vocab,
        seed: u64,
        precision: Precision,
    ) -> Result<Self> {
        if config.vocab_size != vocab.size {
            return Err(LabError::InvalidConfig(format!(
                "model vocab_size {} != tokenizer size {}",
                config.vocab_size, vocab.size
            )));
        }
        let params = crate::model::params::init_params(config, arch, seed, precision)?;
        Ok(Checkpoint {
            params,
            optimizer_state: None,
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                arch,
                objective: None,
                cumulative_tokens_seen: 0,
                cumulative_tokens_trained: 0,
                stage_history: Vec::new(),
                config: config.clone(),
                vocab,
                precision,
                empty_encoder: false,
            },
        })
    }

    /// The architecture the forward pass must run with; empty-encoder
    /// conversions keep the ED tree while presenting as a causal decoder.
    pub fn forward_arch(&self) -> ArchitectureKind {
        if self.meta.empty_encoder {
            ArchitectureKind::EncoderDecoder
        } else {
            self.meta.arch
        }
    }

    pub fn stage_labels(&self) -> Vec<String> {
        self.meta.stage_history.iter().map(|s| s.label()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    path: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
    optimizer_state: Option<OptimizerState>,
}

pub fn save(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        format_version: FORMAT_VERSION,
        meta: ck.meta.clone(),
        params: ck
            .params
            .iter()
            .map(|(p, t)| ParamEntry {
                path: p.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        optimizer_state: ck.optimizer_state.clone(),
    };
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    for (_, t) in ck.params.iter() {
        let bytes: Vec<u8> = match ck.meta.precision {
            Precision::High => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            Precision::Low => t
                .data()
                .iter()
                .flat_map(|v| (*v as f32).to_le_bytes())
                .collect(),
        };
        file.write_all(&(bytes.len() as u64).to_le_bytes())?;
        file.write_all(&bytes)?;
    }
    file.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: Header = serde_json::from_str(header_line.trim_end())?;
    if header.format_version != FORMAT_VERSION {
        return Err(LabError::CheckpointFormat(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut params = ParamTree::new();
    for entry in &header.params {
        let mut len_bytes = [0u8; 8];
        reader.read_exact(&mut len_bytes)?;
        let len = u64::from_le_bytes(len_bytes) as usize;
        let mut raw = vec![0u8; len];
        reader.read_exact(&mut raw)?;
        let data: Vec<f64> = match header.meta.precision {
            Precision::High => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Precision::Low => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let expected: usize = entry.shape.iter().product();
        if data.len() != expected {
            return Err(LabError::CheckpointFormat(format!(
                "blob for {} has {} values, shape needs {}",
                entry.path,
                data.len(),
                expected
            )));
        }
        params.insert(
            entry.path.clone(),
            Tensor::new(entry.shape.clone(), data, header.meta.precision),
        );
    }
    Ok(Checkpoint {
        params,
        optimizer_state: header.optimizer_state,
        meta: header.meta,
    })
}
