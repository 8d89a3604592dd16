//! Task-adaptive knowledge-graph construction for retrieval-augmented
//! generation.
//!
//! The pipeline retrieves chunked external knowledge, routes the query to a
//! domain extraction template, and trains a small autoregressive model to
//! emit a typed knowledge graph inline between learnable delimiter tokens
//! before answering. Training runs in two stages: supervised extraction
//! fine-tuning on gold instruction-graph pairs, then REINFORCE over
//! parallel sampled subgraphs with a token-level likelihood mixing network.

pub mod autodiff;
pub mod data;
pub mod intent;
pub mod kg;
pub mod lm;
pub mod metrics;
pub mod mixing;
pub mod retrieval;
pub mod synth;
pub mod trainer;

pub use autodiff::{Adam, AutodiffError, ParamStore, Parameter, Tape, Tensor, Var};
pub use lm::{LanguageModel, LmConfig, LmError, Vocabulary};
