//! Retrieval metrics over an N x N score matrix whose diagonal holds the
//! matched pairs: recall at K in both directions, the six-way rSum, and a
//! CSV export of matched/mismatched score distributions.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{pair_score, unweighted_pair_score};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalReport {
    pub pair_count: usize,
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
    pub rsum: f64,
}

/// Rank of the true match for one query: 1 plus the number of candidates
/// that strictly beat it, counting equal-scored candidates with a lower
/// index as ahead (deterministic tie handling).
fn match_rank(scores: &Mat, query: usize, direction: Direction) -> usize {
    let n = scores.rows();
    let true_score = scores.get(query, query);
    let mut ahead = 0;
    for c in 0..n {
        if c == query {
            continue;
        }
        let s = match direction {
            Direction::ImageToText => scores.get(query, c),
            Direction::TextToImage => scores.get(c, query),
        };
        if s > true_score || (s == true_score && c < query) {
            ahead += 1;
        }
    }
    ahead + 1
}

/// Percentage of queries whose match ranks within the top K.
pub fn recall_at_k(scores: &Mat, direction: Direction, k: usize) -> Result<f64> {
    let n = scores.rows();
    if n == 0 || scores.cols() != n {
        return Err(Error::Shape(format!(
            "score matrix must be square and nonempty, got {}x{}",
            n,
            scores.cols()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("recall K = {k} outside 1..={n}")));
    }
    if !scores.all_finite() {
        return Err(Error::Numeric("non-finite retrieval score".into()));
    }
    let hits = (0..n).filter(|&q| match_rank(scores, q, direction) <= k).count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// The standard six-recall report. On corpora smaller than a cutoff the
/// cutoff is clamped to N (every match then trivially ranks inside it),
/// which keeps tiny smoke-test corpora evaluable.
pub fn rsum_report(scores: &Mat) -> Result<RetrievalReport> {
    let n = scores.rows();
    let clamp = |k: usize| k.min(n);
    let r1_i2t = recall_at_k(scores, Direction::ImageToText, clamp(1))?;
    let r5_i2t = recall_at_k(scores, Direction::ImageToText, clamp(5))?;
    let r10_i2t = recall_at_k(scores, Direction::ImageToText, clamp(10))?;
    let r1_t2i = recall_at_k(scores, Direction::TextToImage, clamp(1))?;
    let r5_t2i = recall_at_k(scores, Direction::TextToImage, clamp(5))?;
    let r10_t2i = recall_at_k(scores, Direction::TextToImage, clamp(10))?;
    let rsum = r1_i2t + r5_i2t + r10_i2t + r1_t2i + r5_t2i + r10_t2i;
    Ok(RetrievalReport {
        pair_count: n,
        r1_i2t,
        r5_i2t,
        r10_i2t,
        r1_t2i,
        r5_t2i,
        r10_t2i,
        rsum,
    })
}

/// A corpus of projected, normalized token sets plus optional per-instance
/// semantic weights, ready for pairwise scoring.
pub struct ScoringView<'a> {
    pub images: &'a [Mat],
    pub texts: &'a [Mat],
    pub weights_v: Option<&'a [Vec<f64>]>,
    pub weights_t: Option<&'a [Vec<f64>]>,
}

impl<'a> ScoringView<'a> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn score(&self, i: usize, j: usize) -> Result<f64> {
        match (self.weights_v, self.weights_t) {
            (Some(wv), Some(wt)) => pair_score(&self.images[i], &self.texts[j], &wv[i], &wt[j]),
            (None, None) => unweighted_pair_score(&self.images[i], &self.texts[j]),
            _ => Err(Error::Config("weights must be given for both modalities or neither".into())),
        }
    }

    pub fn unweighted_score(&self, i: usize, j: usize) -> Result<f64> {
        unweighted_pair_score(&self.images[i], &self.texts[j])
    }

    /// Full N x N score matrix, image queries in rows. Rows are computed
    /// in parallel but written back in index order, so the result does not
    /// depend on the worker count.
    pub fn score_matrix(&self) -> Result<Mat> {
        use rayon::prelude::*;
        let n = self.len();
        if n == 0 {
            return Err(Error::Shape("empty scoring view".into()));
        }
        let rows: Vec<Result<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| self.score(i, j)).collect())
            .collect();
        let mut out = Mat::zeros(n, n);
        for (i, row) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&row?);
        }
        Ok(out)
    }
}

fn min_max_normalize(values: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
}

/// Write matched and sampled-mismatched aggregate scores under weighted
/// and unweighted interaction as CSV (`series,pair_id,score`), min-max
/// normalized to [0,1] separately for the weighted and unweighted pair of
/// series. One mismatched partner is sampled per pair.
pub fn export_score_distribution<R: Rng>(
    view: &ScoringView<'_>,
    path: &Path,
    rng: &mut R,
) -> Result<()> {
    let n = view.len();
    if n < 2 {
        return Err(Error::Shape("distribution export needs at least two pairs".into()));
    }
    let mismatches: Vec<usize> = (0..n)
        .map(|i| {
            let j = rng.gen_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect();
    let mut weighted: Vec<f64> = Vec::with_capacity(2 * n);
    let mut unweighted: Vec<f64> = Vec::with_capacity(2 * n);
    for i in 0..n {
        weighted.push(view.score(i, i)?);
        unweighted.push(view.unweighted_score(i, i)?);
    }
    for (i, &j) in mismatches.iter().enumerate() {
        weighted.push(view.score(i, j)?);
        unweighted.push(view.unweighted_score(i, j)?);
    }
    min_max_normalize(&mut weighted);
    min_max_normalize(&mut unweighted);

    let mut csv = String::from("series,pair_id,score\n");
    for i in 0..n {
        csv.push_str(&format!("matched_weighted,{i},{}\n", weighted[i]));
    }
    for i in 0..n {
        csv.push_str(&format!("mismatched_weighted,{i},{}\n", weighted[n + i]));
    }
    for i in 0..n {
        csv.push_str(&format!("matched_unweighted,{i},{}\n", unweighted[i]));
    }
    for i in 0..n {
        csv.push_str(&format!("mismatched_unweighted,{i},{}\n", unweighted[n + i]));
    }
    fs::write(path, csv).map_err(|e| Error::io(path.display().to_string(), e))
}
