//! Layer-pruned ViT tracker with asynchronous template/search extraction,
//! cached template features, a center head, its training objective, and an
//! exact compute-cost model.

pub mod bench;
pub mod cli;
pub mod config;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod head;
pub mod objective;
pub mod runtime;
pub mod synth;
pub mod tensor;
pub mod verify;
pub mod weights;

pub use config::{ModelConfig, Variant};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use weights::WeightStore;
