//! Variational learning of textual error representations behind math MCQ
//! distractors, plus error-conditioned distractor generation.
//!
//! The pipeline trains three small conditional sequence models — an error
//! prior p(e|s), a distractor decoder p(d|s,e), and an error-identifier
//! posterior q(e|s,d) — first with supervised fine-tuning on labeled
//! question–distractor pairs, then by maximizing a Monte Carlo ELBO with
//! soft-token sampling from the posterior. Generation overproduces
//! error/distractor candidates with (diverse) beam search and ranks the pool
//! by beam score. Evaluation covers distractor alignment at K and error
//! similarity/diversity with pluggable text-similarity back-ends.

pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod manifest;
pub mod math;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod softtoken;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
