//! Desk-scale transformer pretraining lab.
//!
//! Everything needed to pretrain, adapt, finetune, and zero-shot-evaluate
//! small transformer language models on toy corpora, with three attention
//! visibility regimes (causal decoder, non-causal decoder, encoder-decoder)
//! sharing one parameter layout where the architectures permit it.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod trainer;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use error::{LabError, Result};
pub use tensor::{Precision, Tensor};
