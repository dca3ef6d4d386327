//! Tokenization, corpora, and the objective-specific batch constructions.

pub mod batch;
pub mod corpus;
pub mod corrupt;
pub mod pack;
pub mod vocab;

pub use batch::{dump_batch, parse_batch_dump, EncoderStreams, ObjectiveKind, PackedBatch, PAD};
pub use corpus::Corpus;
pub use corrupt::{corrupt_spans, raw_len_for_budget, CorruptedExample};
pub use pack::{
    make_mlm_batch, pack_flm, pack_plm, pack_plm_encdec, token_accounting, TokenAccounting,
};
pub use vocab::Vocab;
