//! End-to-end task-oriented dialogue with a Transformer encoder, two
//! copy-augmented decoders and two-stage (belief span, then response)
//! decoding.

pub mod data;
pub mod dialogue;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
