//! Factorized target/destination grounding with a switching funnel
//! transformer: data, model, training, evaluation and pair scoring.

pub mod bench;
pub mod checkpoint;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod funnel;
pub mod heads;
pub mod model;
pub mod train;

pub use error::{Result, ShefuError};
