//! Configuration, synthetic corpora, the training curriculum and baselines.

pub mod config;
pub mod corpus;
pub mod system;
pub mod train;

pub use config::RunConfig;
pub use corpus::{prompt_text, templates, textualize, Corpus, PromptMode, QaInstance, Split, Stage};
pub use system::{EpochRecord, Prepared, Scorer, System};
pub use train::{accumulate_gradients, compare, evaluate_split, pretrain_lm, token_table, train_stage, EarlyStopping, Plateau, TrainOutcome};
