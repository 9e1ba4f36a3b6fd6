//! A desk-scale laboratory for parameter-shared transformers.
//!
//! The crate provides a small reverse-mode autodiff engine ([`autodiff`]), an
//! encoder-decoder transformer ([`model`]) that can be realized under three
//! sharing topologies ([`sharing`]), static parameter/FLOPs/parallelism
//! accounting ([`complexity`]), a training loop with inverse-sqrt warmup, L2
//! penalty and checkpoint averaging ([`training`]), synthetic sequence tasks
//! ([`data`]), and the experiment drivers behind the `sharelab` CLI
//! ([`experiments`]).

pub mod autodiff;
pub mod complexity;
pub mod data;
pub mod error;
pub mod experiments;
pub mod model;
pub mod sharing;
pub mod tensor;
pub mod training;

pub use autodiff::{AttnLayout, ParamId, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, TransformerModel};
pub use sharing::{ShareMode, ShareScope, SharedSublayers, SharingConfig, SharingPlan};
pub use tensor::Tensor;
