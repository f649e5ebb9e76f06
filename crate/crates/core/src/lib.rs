//! Cross-modal embedding alignment lab.
//!
//! A small, fully deterministic stack for studying modality-gap closure:
//! a tape autodiff engine, kernel-based distribution alignment losses, a
//! two-stream attention adapter, and a token-guided toy decoder, trained
//! end-to-end on synthetic paired (audio-feature, caption) data.

pub mod error;
pub mod tensor;
pub mod rng;
pub mod tape;
pub mod train;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod adapter;
pub mod align;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod suite;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
