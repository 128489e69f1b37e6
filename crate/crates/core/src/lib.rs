//! Continual concept unlearning for a class-conditional diffusion model.
//!
//! [`diffusion`] holds the generative model, [`duge`] the unlearning engine
//! and the naive fine-tuning baseline, [`evalkit`] the classifier-based
//! accuracy matrices and FID/KID analogs, and [`pipeline`] the end-to-end
//! stages behind the `duge` command.

pub mod condition;
pub mod config;
pub mod diffusion;
pub mod duge;
pub mod error;
pub mod evalkit;
pub mod glyph;
pub mod pipeline;

pub use condition::Condition;
pub use error::{CoreError, Result};
