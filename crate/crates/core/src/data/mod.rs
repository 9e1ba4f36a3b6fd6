//! Synthetic sequence tasks, token-budget batching and sequence metrics.

pub mod batching;
pub mod metrics;
pub mod tasks;

pub use batching::{make_batches, Batch};
pub use metrics::{sentence_bleu3, token_accuracy};
pub use tasks::{
    generate, Dataset, Example, TaskConfig, TaskKind, BOS, EOS, FIRST_SYMBOL, PAD, UNK,
};
