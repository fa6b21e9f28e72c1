//! Flat named entity recognition from ensemble-averaged contextual word
//! embeddings and a linear-chain CRF.
//!
//! Encoder outputs arrive as `EMB1` files (one per encoder and split),
//! optionally with subword tokenizations. Each encoder's vectors are pooled
//! to words, averaged across encoders, and scored by a CRF trained on the
//! negative log-likelihood and decoded with Viterbi.

pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod crf;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
