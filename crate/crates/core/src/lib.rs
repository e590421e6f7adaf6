//! Hierarchical dialogue generation with a two-part fusion decoder.
//!
//! Context utterances are encoded word by word with a GRU, the resulting
//! sentence vectors are contextualized by a self-attention encoder, and the
//! response decoder is split into an intention part (attending to the
//! contextualized vectors) and a generation part (attending to the raw
//! sentence vectors). A decoder-mode switch turns the fusion off for
//! ablations.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
