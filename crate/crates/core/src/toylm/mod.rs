//! Stand-in causal LM: frozen backbone, LoRA on the attention projections,
//! and a word-level vocabulary with a knowledge placeholder.

pub mod model;
pub mod vocab;

pub use model::{argmax, lm_loss, token_table, trainable_parameters, LoraConfig, ToyLm, ToyLmConfig};
pub use vocab::{tokenize, Vocabulary};
