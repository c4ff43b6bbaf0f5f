//! Extractive slot filling over tweets with per-slot continuous prompts.
//!
//! The crate is self-contained: a small reverse-mode autodiff core over `f64`
//! tensors ([`tape`]), a transformer encoder ([`encoder`]), per-slot prompt
//! generators ([`prompt`]), span and binary heads ([`span_head`]), the
//! slot-filling pipeline with its post-processing rules ([`pipeline`]),
//! corpus, registry and checkpoint I/O, an Adam trainer and the scorer.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod filler;
pub mod gradcheck;
mod linalg;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod prompt;
pub mod slots;
pub mod span_head;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenize;
pub mod trainer;
pub mod vocab;

pub use corpus::{load_corpus, save_corpus, TweetExample};
pub use error::{Error, Result};
pub use filler::SlotFiller;
pub use model::{ModelConfig, ModelParams};
pub use slots::{EventType, SlotId, SlotKind, SlotRegistry, SlotSpec};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use vocab::Vocab;
