//! Fine-grained token interaction scoring.
//!
//! For image tokens v_1..v_nv and text tokens t_1..t_nt the correlation
//! matrix holds s_ij = sum_d w_v[d]*v_i[d] * w_t[d]*t_j[d], i.e. a dot
//! product with a per-dimension semantic weight applied to each side. The
//! aggregate pair score averages the best match per image token and the
//! best match per text token:
//!
//! ```text
//! S = (1/n_v) * sum_i max_j s_ij + (1/n_t) * sum_j max_i s_ij
//! ```
//!
//! With L2-normalized tokens and weights in [0,1] every s_ij lies in
//! [-1, 1], so |S| <= 2. Maxima resolve ties to the lowest index and the
//! winning indices are recorded so the training backward pass can route
//! gradients through exactly the entries that produced the score.

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub values: Mat,
    /// Best text index per image token (row argmax, ties to lowest index).
    pub argmax_rows: Vec<usize>,
    /// Best image index per text token (column argmax, ties to lowest index).
    pub argmax_cols: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn n_v(&self) -> usize {
        self.values.rows()
    }

    pub fn n_t(&self) -> usize {
        self.values.cols()
    }
}

fn check_weights(dim: usize, weights: &[f64], side: &str) -> Result<()> {
    if weights.len() != dim {
        return Err(Error::Shape(format!(
            "{side} weight vector has {} entries, tokens have dim {dim}",
            weights.len()
        )));
    }
    Ok(())
}

/// Multiply each token row elementwise by a per-dimension weight vector.
pub fn weight_tokens(tokens: &Mat, weights: &[f64]) -> Mat {
    let mut out = tokens.clone();
    for i in 0..out.rows() {
        for (v, w) in out.row_mut(i).iter_mut().zip(weights) {
            *v *= w;
        }
    }
    out
}

/// Correlation of already-weighted token matrices: values[i][j] is the dot
/// product of row i of `vw` with row j of `tw`, accumulated in dimension
/// order. Also records row and column argmaxes.
pub fn correlation_of_weighted(vw: &Mat, tw: &Mat) -> Result<CorrelationMatrix> {
    if vw.rows() == 0 || tw.rows() == 0 {
        return Err(Error::Shape("empty token set".into()));
    }
    if vw.cols() != tw.cols() {
        return Err(Error::Shape(format!(
            "token dims differ: {} vs {}",
            vw.cols(),
            tw.cols()
        )));
    }
    let (n_v, n_t) = (vw.rows(), tw.rows());
    let mut values = Mat::zeros(n_v, n_t);
    for i in 0..n_v {
        let vi = vw.row(i);
        for j in 0..n_t {
            let tj = tw.row(j);
            let mut acc = 0.0;
            for (a, b) in vi.iter().zip(tj) {
                acc += a * b;
            }
            values.set(i, j, acc);
        }
    }
    if !values.all_finite() {
        return Err(Error::Numeric("non-finite correlation value".into()));
    }
    let argmax_rows = (0..n_v)
        .map(|i| {
            let row = values.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let argmax_cols = (0..n_t)
        .map(|j| {
            let mut best = 0;
            for i in 0..n_v {
                if values.get(i, j) > values.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok(CorrelationMatrix { values, argmax_rows, argmax_cols })
}

/// Semantically weighted correlation matrix.
pub fn correlation_matrix(
    v_tokens: &Mat,
    t_tokens: &Mat,
    weights_v: &[f64],
    weights_t: &[f64],
) -> Result<CorrelationMatrix> {
    check_weights(v_tokens.cols(), weights_v, "image")?;
    check_weights(t_tokens.cols(), weights_t, "text")?;
    let vw = weight_tokens(v_tokens, weights_v);
    let tw = weight_tokens(t_tokens, weights_t);
    correlation_of_weighted(&vw, &tw)
}

/// Plain unweighted correlation, written as its own loop rather than as
/// the weighted path with ones so the two can be checked against each
/// other.
pub fn unweighted_correlation_matrix(v_tokens: &Mat, t_tokens: &Mat) -> Result<CorrelationMatrix> {
    if v_tokens.rows() == 0 || t_tokens.rows() == 0 {
        return Err(Error::Shape("empty token set".into()));
    }
    if v_tokens.cols() != t_tokens.cols() {
        return Err(Error::Shape(format!(
            "token dims differ: {} vs {}",
            v_tokens.cols(),
            t_tokens.cols()
        )));
    }
    let (n_v, n_t) = (v_tokens.rows(), t_tokens.rows());
    let mut values = Mat::zeros(n_v, n_t);
    for i in 0..n_v {
        for j in 0..n_t {
            let mut acc = 0.0;
            for d in 0..v_tokens.cols() {
                acc += v_tokens.get(i, d) * t_tokens.get(j, d);
            }
            values.set(i, j, acc);
        }
    }
    if !values.all_finite() {
        return Err(Error::Numeric("non-finite correlation value".into()));
    }
    let argmax_rows = (0..n_v)
        .map(|i| {
            let row = values.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let argmax_cols = (0..n_t)
        .map(|j| {
            let mut best = 0;
            for i in 0..n_v {
                if values.get(i, j) > values.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok(CorrelationMatrix { values, argmax_rows, argmax_cols })
}

/// Max-correspondence aggregate of a correlation matrix.
pub fn aggregate_score(correlation: &CorrelationMatrix) -> f64 {
    let n_v = correlation.n_v();
    let n_t = correlation.n_t();
    let mut row_sum = 0.0;
    for (i, &j) in correlation.argmax_rows.iter().enumerate() {
        row_sum += correlation.values.get(i, j);
    }
    let mut col_sum = 0.0;
    for (j, &i) in correlation.argmax_cols.iter().enumerate() {
        col_sum += correlation.values.get(i, j);
    }
    row_sum / n_v as f64 + col_sum / n_t as f64
}

/// Weighted correlation followed by aggregation.
pub fn pair_score(
    v_tokens: &Mat,
    t_tokens: &Mat,
    weights_v: &[f64],
    weights_t: &[f64],
) -> Result<f64> {
    Ok(aggregate_score(&correlation_matrix(v_tokens, t_tokens, weights_v, weights_t)?))
}

/// Unweighted correlation followed by aggregation.
pub fn unweighted_pair_score(v_tokens: &Mat, t_tokens: &Mat) -> Result<f64> {
    Ok(aggregate_score(&unweighted_correlation_matrix(v_tokens, t_tokens)?))
}
