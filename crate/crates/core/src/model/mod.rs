//! Transformer stacks, masks, parameters, and losses.

pub mod config;
pub mod forward;
pub mod loss;
pub mod mask;
pub mod params;

pub use config::{ArchitectureKind, ModelConfig, RelBiasConfig};
pub use forward::{forward, loss_and_grads, Mode};
pub use loss::{loss_and_zloss, LossBreakdown, Z_LOSS_COEFF};
pub use mask::{build_mask, AttentionMask, MaskKind};
pub use params::{count_params, init_params, ParamTree};
