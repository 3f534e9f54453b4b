//! Cross-modal retrieval on token embeddings, desk scale.
//!
//! The pipeline projects raw image/text token dumps into a shared space,
//! scores pairs by max-correspondence token interaction with per-dimension
//! semantic weights, and learns those weights on the fly: sign-agreement
//! statistics mark style-heavy dimensions, weighted k-means over feature
//! columns extracts style prototypes, and a feedback-weighted running
//! average refines the prototypes epoch over epoch. Everything is driven
//! from synthetic corpora with planted ground truth so the machinery can
//! be measured, not just eyeballed.

pub mod checkpoint;
pub mod clustering;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod interaction;
pub mod mat;
pub mod probability;
pub mod prototypes;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
