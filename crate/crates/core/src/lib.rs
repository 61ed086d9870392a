//! Speaker/emotion disentanglement toolkit: contrastive reference encoders,
//! gradient-reversal disentanglement, a conditional coupling flow for
//! conversion, self-augmentation, and kernel-alignment analysis on a
//! synthetic factor dataset.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod metrics;
pub mod numerics;
pub mod selfaug;
pub mod synthdata;
pub mod tape;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Matrix;
