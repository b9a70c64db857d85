//! Hierarchical three-stage (Perception → Prediction → Planning) question
//! answering on a synthetic driving-scene task, with prompt-based context
//! passing, learned gated hidden-state context projection, and a cross-stage
//! consistency evaluation suite. Everything runs self-contained on CPU.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod optim;
pub mod rng;
pub mod tensor;

pub mod backbone;
pub mod manifest;
pub mod pipeline;
pub mod projector;
pub mod scene;
pub mod stage;
pub mod tokenizer;

pub use error::{Error, Result};
