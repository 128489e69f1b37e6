//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Forward ops are recorded on a [`Tape`]; [`Tape::backward`] sweeps it once
//! in reverse creation order. Losses and gradients are always accumulated in
//! 64-bit; checkpoints store parameters as 32-bit floats.

mod adam;
mod error;
mod gradcheck;
pub mod kernels;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck};
pub use params::{Bound, ManifestEntry, ParamStore, CHECKPOINT_MAGIC};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
