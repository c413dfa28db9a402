//! Task-definition-guided expert ensembling over low-rank adapters, at desk
//! scale.
//!
//! A frozen one-block attention classifier hosts low-rank adapters. Each
//! training task yields an expert adapter stored with its definition in an
//! [`pool::ExpertPool`]. For a new task, a definition is extracted from the
//! demonstrations, similar experts are retrieved by embedding similarity,
//! averaged into an initialization, and fine-tuned on the demonstrations.

pub mod config;
pub mod embedder;
pub mod extractor;
pub mod ensemble;
pub mod format;
pub mod harness;
pub mod hash;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod pool;
pub mod quality;
pub mod tasks;
pub mod trainer;

pub use lora::{Adapter, AdapterSpec, Factors, LoraError};
pub use model::{Example, HostModel, ModelConfig, ModelError};
pub use numerics::{Rng, Tensor};
