//! Knowledge-graph star subgraphs compressed into discrete tokens and
//! injected into a small causal language model.
//!
//! The pipeline: [`graphio`] builds PageRank-pruned star graphs and label
//! features, [`gnn`] summarizes each graph at its center node, [`rvq`]
//! quantizes the summary with directional residual quantization, [`align`]
//! maps the tokens into the language model's embedding space and splices
//! them into the prompt, [`toylm`] is the frozen backbone with LoRA
//! adapters, [`eval`] scores Hit@k, and [`pipeline`] ties training,
//! baselines and checkpoints together.

pub mod align;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graphio;
pub mod numerics;
pub mod pipeline;
pub mod rvq;
pub mod toylm;

pub use error::{Error, Result};
