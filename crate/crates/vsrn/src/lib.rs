//! Visual semantic reasoning network for image-text matching.
//!
//! The image side embeds detected region features into a joint space,
//! enhances them with residual graph convolutions over a fully-connected
//! affinity graph, and condenses them into a single scene representation
//! with a gated recurrent memory. Captions are encoded into the same space,
//! and the model trains on a hinge triplet ranking loss with in-batch
//! hardest negatives plus a caption-generation log-likelihood. The crate
//! also ships a synthetic-corpus harness, a bidirectional Recall@K
//! evaluator, and an attention-map renderer, all on top of a small
//! reverse-mode differentiation engine.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};

pub mod global;
pub mod region;

#[cfg(test)]
pub(crate) mod test_util;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
mod io_util;
pub mod model;
pub mod objectives;
pub mod text;
pub mod train;
pub mod viz;
