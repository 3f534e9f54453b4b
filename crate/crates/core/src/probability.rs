//! Semantic/style probability estimation per embedding dimension.
//!
//! Two estimators live here. The corpus-level pseudo probability counts
//! sign agreement between matched pairs: dimension d of a matched pair
//! (V, T) gets p_hat_d = (1/(n_v*n_t)) * sum_ij [v_id * t_jd > 0], and the
//! corpus value averages that uniformly over pairs. A product of exactly
//! zero counts as disagreement. The style complement is q_hat = 1 - p_hat.
//!
//! The prototype-based estimator scores one column instance against the
//! current style prototypes: with delta2 the squared distance to the
//! nearest prototype, the style probability is sigmoid(delta2 / epsilon)
//! in `PaperLiteral` mode and sigmoid(-delta2 / epsilon) in
//! `NegatedExponent` mode. The negated form is the default: it makes
//! columns close to a style prototype score as style (probability near
//! 0.5 from above is impossible, values fall in (0, 0.5], so the semantic
//! complement lands in [0.5, 1)), which is the behavior the surrounding
//! training loop relies on.

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingSet, Modality};
use crate::error::{Error, Result};
use crate::mat::{squared_distance, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// sigmoid(delta2 / epsilon): distance raises the style probability.
    PaperLiteral,
    /// sigmoid(-delta2 / epsilon): distance lowers the style probability.
    #[default]
    NegatedExponent,
}

impl std::fmt::Display for SignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SignMode::PaperLiteral => write!(f, "paper_literal"),
            SignMode::NegatedExponent => write!(f, "negated_exponent"),
        }
    }
}

impl std::str::FromStr for SignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(SignMode::PaperLiteral),
            "negated_exponent" => Ok(SignMode::NegatedExponent),
            other => Err(Error::Config(format!(
                "unknown sign mode {other:?} (expected paper_literal or negated_exponent)"
            ))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Corpus-level pseudo semantic probability per dimension, counted over
/// matched pairs. Counting is integral, so the result is independent of
/// pair order bit for bit.
pub fn pseudo_semantic_probability(pairs: &[(&EmbeddingSet, &EmbeddingSet)]) -> Result<Vec<f64>> {
    let Some((first_v, first_t)) = pairs.first() else {
        return Err(Error::Shape("pseudo probability needs at least one pair".into()));
    };
    if first_v.modality != Modality::Image || first_t.modality != Modality::Text {
        return Err(Error::Shape("pairs must be (image, text)".into()));
    }
    let d = first_v.dim();
    let (n_v, n_t) = (first_v.n_tokens(), first_t.n_tokens());
    let mut counts = vec![0u64; d];
    for (v, t) in pairs {
        if v.dim() != d || t.dim() != d || v.n_tokens() != n_v || t.n_tokens() != n_t {
            return Err(Error::Shape(
                "all pairs must share token counts and dimension".into(),
            ));
        }
        for dim in 0..d {
            for i in 0..n_v {
                let vi = v.tokens.get(i, dim);
                for j in 0..n_t {
                    if vi * t.tokens.get(j, dim) > 0.0 {
                        counts[dim] += 1;
                    }
                }
            }
        }
    }
    let denom = (pairs.len() * n_v * n_t) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / denom).collect())
}

/// Style probability of one column instance given the prototype matrix
/// (one prototype per row).
pub fn style_probability(
    column_instance: &[f64],
    prototypes: &Mat,
    epsilon: f64,
    sign_mode: SignMode,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::Numeric(format!("epsilon must be positive, got {epsilon}")));
    }
    let delta2 = min_sq_distance(column_instance, prototypes)?;
    let ratio = delta2 / epsilon;
    Ok(match sign_mode {
        SignMode::PaperLiteral => sigmoid(ratio),
        SignMode::NegatedExponent => sigmoid(-ratio),
    })
}

/// Squared distance from a column instance to its nearest prototype.
pub fn min_sq_distance(column_instance: &[f64], prototypes: &Mat) -> Result<f64> {
    if prototypes.rows() == 0 {
        return Err(Error::Shape("prototype matrix is empty".into()));
    }
    if prototypes.cols() != column_instance.len() {
        return Err(Error::Shape(format!(
            "column instance has {} entries, prototypes have {}",
            column_instance.len(),
            prototypes.cols()
        )));
    }
    let mut best = f64::INFINITY;
    for k in 0..prototypes.rows() {
        let d2 = squared_distance(column_instance, prototypes.row(k));
        if d2 < best {
            best = d2;
        }
    }
    Ok(best)
}

/// Complement a style probability into a semantic one.
pub fn to_semantic(style_probability: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&style_probability) {
        return Err(Error::Numeric(format!(
            "style probability {style_probability} outside [0, 1]"
        )));
    }
    Ok(1.0 - style_probability)
}

/// Exact elementwise complement of a probability vector.
pub fn complement(probabilities: &[f64]) -> Result<Vec<f64>> {
    probabilities.iter().map(|&p| to_semantic(p)).collect()
}

/// Median of the given squared distances, used as the default epsilon.
/// Floored at a tiny positive value so the sigmoid ratio stays defined
/// even when most instances sit exactly on a prototype.
pub fn epsilon_from_deltas(deltas: &[f64]) -> Result<f64> {
    if deltas.is_empty() {
        return Err(Error::Shape("epsilon needs at least one delta".into()));
    }
    let mut sorted = deltas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN delta"));
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    Ok(median.max(1e-12))
}

/// Per-column semantic probabilities of one instance's token matrix:
/// column d is scored against the prototypes and complemented.
pub fn instance_semantic_probabilities(
    tokens: &Mat,
    prototypes: &Mat,
    epsilon: f64,
    sign_mode: SignMode,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tokens.cols());
    let mut column = vec![0.0; tokens.rows()];
    for d in 0..tokens.cols() {
        for i in 0..tokens.rows() {
            column[i] = tokens.get(i, d);
        }
        let q = style_probability(&column, prototypes, epsilon, sign_mode)?;
        out.push(to_semantic(q)?);
    }
    Ok(out)
}

/// Probability snapshot for one modality at one epoch.
#[derive(Debug, Clone)]
pub struct ModalityProbabilities {
    /// Corpus-level pseudo semantic probability per dimension.
    pub pseudo_semantic: Vec<f64>,
    /// Exact complement of `pseudo_semantic`.
    pub pseudo_style: Vec<f64>,
    /// Epsilon used for the prototype-based estimator, when one was fit.
    pub epsilon: Option<f64>,
    /// Per-instance semantic weight vectors, indexed by instance id.
    pub per_instance_semantic: Vec<Vec<f64>>,
}

impl ModalityProbabilities {
    pub fn from_pseudo(pseudo_semantic: Vec<f64>) -> Result<Self> {
        let pseudo_style = complement(&pseudo_semantic)?;
        Ok(ModalityProbabilities {
            pseudo_semantic,
            pseudo_style,
            epsilon: None,
            per_instance_semantic: Vec::new(),
        })
    }
}

/// Full probability state across both modalities.
#[derive(Debug, Clone)]
pub struct ProbabilityState {
    pub sign_mode: SignMode,
    /// Epoch whose end produced this state.
    pub epoch: usize,
    pub image: ModalityProbabilities,
    pub text: ModalityProbabilities,
}

impl ProbabilityState {
    pub fn modality(&self, modality: Modality) -> &ModalityProbabilities {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }
}
