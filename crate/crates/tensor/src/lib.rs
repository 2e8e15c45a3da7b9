//! Dense tensors, a tape-based reverse-mode autodiff engine, the Adam
//! optimizer and a finite-difference gradient checker.
//!
//! Everything is generic over [`Real`] so models can train in `f32` and be
//! gradient-checked in `f64` with identical code paths.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod real;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_at, Coordinates, GradCheckReport};
pub use ops::{gelu, layer_norm, seq_max_pool, softmax};
pub use real::Real;
pub use tape::{Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::Tensor;
