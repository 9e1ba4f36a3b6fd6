//! Encoder-decoder transformer built from pre-norm residual sublayers.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod transformer;

pub use config::ModelConfig;
pub use transformer::{TokenBlock, TransformerModel};
