//! Token embedding sets and the linear projection heads that map raw
//! backbone dumps into the shared interaction space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Norms below this are treated as degenerate: the row is left unchanged by
/// normalization and reported to the caller instead of being divided by ~0.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Text => write!(f, "text"),
        }
    }
}

/// One instance's token embeddings: n rows of dimension D.
/// For images the rows are patch features, for texts word features.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub modality: Modality,
    pub tokens: Mat,
    pub instance_id: usize,
}

impl EmbeddingSet {
    pub fn new(modality: Modality, tokens: Mat, instance_id: usize) -> Self {
        EmbeddingSet { modality, tokens, instance_id }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Per-modality linear map from raw dimension D_raw to interaction
/// dimension D. No bias, matching a bare projection layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub modality: Modality,
    pub weight: Mat,
}

impl ProjectionHead {
    pub fn new(modality: Modality, weight: Mat) -> Self {
        ProjectionHead { modality, weight }
    }

    pub fn d_raw(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Apply a projection head to a raw embedding set.
pub fn project(raw: &EmbeddingSet, head: &ProjectionHead) -> Result<EmbeddingSet> {
    if raw.modality != head.modality {
        return Err(Error::Shape(format!(
            "projecting {} tokens through a {} head",
            raw.modality, head.modality
        )));
    }
    if raw.dim() != head.d_raw() {
        return Err(Error::Shape(format!(
            "token dim {} does not match head input dim {}",
            raw.dim(),
            head.d_raw()
        )));
    }
    let tokens = raw.tokens.matmul(&head.weight)?;
    Ok(EmbeddingSet::new(raw.modality, tokens, raw.instance_id))
}

/// Row-wise L2 normalization. Returns the normalized matrix, the original
/// row norms (the training backward pass needs them), and the indices of
/// degenerate rows that were left as-is.
pub fn normalize_rows(tokens: &Mat) -> (Mat, Vec<f64>, Vec<usize>) {
    let mut out = tokens.clone();
    let mut norms = Vec::with_capacity(tokens.rows());
    let mut degenerate = Vec::new();
    for i in 0..tokens.rows() {
        let norm = tokens.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        if norm < DEGENERATE_NORM {
            degenerate.push(i);
            continue;
        }
        for v in out.row_mut(i) {
            *v /= norm;
        }
    }
    (out, norms, degenerate)
}

/// L2-normalize every token of a set. Degenerate rows (norm below
/// [`DEGENERATE_NORM`]) pass through unchanged and are flagged by index.
pub fn l2_normalize(set: &EmbeddingSet) -> (EmbeddingSet, Vec<usize>) {
    let (tokens, _, degenerate) = normalize_rows(&set.tokens);
    (EmbeddingSet::new(set.modality, tokens, set.instance_id), degenerate)
}
