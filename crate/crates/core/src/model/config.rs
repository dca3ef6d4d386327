//! Static description of a transformer variant.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// The three visibility regimes under study. Causal and non-causal decoders
/// share an identical parameter layout for a given config; switching between
/// them is purely an attention-mask change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    CausalDecoder,
    NonCausalDecoder,
    EncoderDecoder,
}

impl ArchitectureKind {
    pub fn label(&self) -> &'static str {
        match self {
            ArchitectureKind::CausalDecoder => "CD",
            ArchitectureKind::NonCausalDecoder => "ND",
            ArchitectureKind::EncoderDecoder => "ED",
        }
    }

    pub fn is_decoder_only(&self) -> bool {
        !matches!(self, ArchitectureKind::EncoderDecoder)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelBiasConfig {
    pub n_buckets: usize,
    pub max_distance: usize,
}

impl Default for RelBiasConfig {
    fn default() -> Self {
        RelBiasConfig {
            n_buckets: 32,
            max_distance: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub decoder_layers: usize,
    /// 0 unless the model is an encoder-decoder.
    pub encoder_layers: usize,
    pub tied_embeddings: bool,
    pub rel_bias: RelBiasConfig,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Desk-scale default used by the toy experiments.
    pub fn desk_default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_heads: 4,
            d_ff: 160,
            decoder_layers: 2,
            encoder_layers: 0,
            tied_embeddings: true,
            rel_bias: RelBiasConfig::default(),
            dropout_rate: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self, arch: ArchitectureKind) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab_size < 2 {
            return Err(LabError::InvalidConfig(
                "dimensions must be positive and vocab_size >= 2".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LabError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.decoder_layers == 0 {
            return Err(LabError::InvalidConfig("decoder_layers must be >= 1".into()));
        }
        match arch {
            ArchitectureKind::EncoderDecoder => {
                if self.encoder_layers == 0 {
                    return Err(LabError::InvalidConfig(
                        "encoder-decoder requires encoder_layers >= 1".into(),
                    ));
                }
            }
            _ => {
                if self.encoder_layers != 0 {
                    return Err(LabError::InvalidConfig(
                        "decoder-only models must have encoder_layers = 0".into(),
                    ));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(LabError::InvalidConfig("dropout_rate must be in [0,1)".into()));
        }
        if self.rel_bias.n_buckets < 2 || self.rel_bias.max_distance == 0 {
            return Err(LabError::InvalidConfig(
                "rel_bias needs n_buckets >= 2 and max_distance > 0".into(),
            ));
        }
        Ok(())
    }
}
