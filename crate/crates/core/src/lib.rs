//! Frozen-decoder image captioning and text-to-image retrieval.
//!
//! A frozen vision encoder and a frozen causal decoder are connected by a
//! small set of trainable linear maps and a learned retrieval token. The
//! decoder captions an image from a single projected visual prefix, and the
//! decoder's final hidden state at the retrieval token, projected into a
//! shared space, is matched against projected image embeddings.

pub mod backbones;
pub mod bridge;
pub mod captioning;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
