//! In-batch negative mining: hardest-by-score and distance-weighted
//! sampling.
//!
//! Distance-weighted sampling draws a negative with probability
//! proportional to the clamped inverse of the unit-sphere pairwise
//! distance density q(d) ~ d^(D-2) * (1 - d^2/4)^((D-3)/2). Inverting the
//! density flattens the distance distribution of selected negatives, so
//! training sees informative candidates across the whole range instead of
//! the concentration-of-measure bulk; the clamp keeps the weight of
//! near-duplicate or near-antipodal points bounded.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::DEGENERATE_NORM;
use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegStrategy {
    HardestInBatch,
    #[default]
    DistanceWeighted,
}

impl std::fmt::Display for NegStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NegStrategy::HardestInBatch => write!(f, "hardest_in_batch"),
            NegStrategy::DistanceWeighted => write!(f, "distance_weighted"),
        }
    }
}

impl std::str::FromStr for NegStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hardest_in_batch" => Ok(NegStrategy::HardestInBatch),
            "distance_weighted" => Ok(NegStrategy::DistanceWeighted),
            other => Err(Error::Config(format!(
                "unknown negative strategy {other:?} (expected hardest_in_batch or distance_weighted)"
            ))),
        }
    }
}

/// One sampled negative of each kind per anchor, as batch-local indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchNegatives {
    /// Text negative for anchor i: pairs image i against this text.
    pub text: Vec<usize>,
    /// Image negative for anchor i: pairs this image against text i.
    pub image: Vec<usize>,
}

/// Unit-norm instance embedding: the renormalized mean of the token rows.
/// A degenerate mean (norm below the cutoff) is returned as-is.
pub fn instance_embedding(tokens: &Mat) -> Vec<f64> {
    let n = tokens.rows() as f64;
    let mut mean = vec![0.0; tokens.cols()];
    for i in 0..tokens.rows() {
        for (m, &v) in mean.iter_mut().zip(tokens.row(i)) {
            *m += v / n;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > DEGENERATE_NORM {
        for m in &mut mean {
            *m /= norm;
        }
    }
    mean
}

/// Clamped inverse of the pairwise-distance density on the unit sphere in
/// R^dim, evaluated in log space. Distances are clipped into (0, 2) so the
/// logs stay finite at coincident or antipodal points.
pub fn inverse_density_weight(distance: f64, dim: usize, clamp: f64) -> f64 {
    let d = distance.clamp(1e-9, 2.0 - 1e-9);
    let log_density =
        (dim as f64 - 2.0) * d.ln() + 0.5 * (dim as f64 - 3.0) * (1.0 - d * d / 4.0).ln();
    if -log_density >= clamp.ln() {
        clamp
    } else {
        (-log_density).exp()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draw one index from `candidates` with probability proportional to
/// `weights`; falls back to uniform when the weights are degenerate.
fn categorical<R: Rng>(candidates: &[usize], weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return candidates[rng.gen_range(0..candidates.len())];
    }
    let mut u = rng.gen::<f64>() * total;
    for (&c, &w) in candidates.iter().zip(weights) {
        u -= w;
        if u <= 0.0 {
            return c;
        }
    }
    candidates[candidates.len() - 1]
}

/// Highest-scoring candidate, ties to the lowest index; an all-tied slate
/// degenerates to a uniform draw.
fn hardest<R: Rng>(candidates: &[usize], scores: &[f64], rng: &mut R) -> usize {
    let mut best = 0;
    let mut all_equal = true;
    for (pos, &s) in scores.iter().enumerate() {
        if s != scores[0] {
            all_equal = false;
        }
        if s > scores[best] {
            best = pos;
        }
    }
    if all_equal {
        candidates[rng.gen_range(0..candidates.len())]
    } else {
        candidates[best]
    }
}

/// Sample one text negative and one image negative per anchor. `scores`
/// holds the batch pair scores with image anchors in rows and is required
/// by the hardest strategy; `images`/`texts` hold the unit instance
/// embeddings the distance-weighted strategy measures against. The
/// positive index is never selected.
pub fn sample_negatives<R: Rng>(
    strategy: NegStrategy,
    scores: Option<&Mat>,
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    clamp: f64,
    rng: &mut R,
) -> Result<BatchNegatives> {
    let b = images.len();
    if b < 2 || texts.len() != b {
        return Err(Error::Shape(format!(
            "negative sampling needs at least two matched pairs, got {b} images and {} texts",
            texts.len()
        )));
    }
    if let Some(s) = scores {
        if s.rows() != b || s.cols() != b {
            return Err(Error::Shape(format!(
                "score matrix is {}x{} for a batch of {b}",
                s.rows(),
                s.cols()
            )));
        }
    }
    let dim = images[0].len();
    let mut text_negs = Vec::with_capacity(b);
    let mut image_negs = Vec::with_capacity(b);
    for anchor in 0..b {
        let candidates: Vec<usize> = (0..b).filter(|&c| c != anchor).collect();
        match strategy {
            NegStrategy::HardestInBatch => {
                let s = scores.ok_or_else(|| {
                    Error::Config("hardest_in_batch needs the batch score matrix".into())
                })?;
                let row: Vec<f64> = candidates.iter().map(|&j| s.get(anchor, j)).collect();
                text_negs.push(hardest(&candidates, &row, rng));
                let col: Vec<f64> = candidates.iter().map(|&k| s.get(k, anchor)).collect();
                image_negs.push(hardest(&candidates, &col, rng));
            }
            NegStrategy::DistanceWeighted => {
                let text_weights: Vec<f64> = candidates
                    .iter()
                    .map(|&j| {
                        inverse_density_weight(euclidean(&images[anchor], &texts[j]), dim, clamp)
                    })
                    .collect();
                text_negs.push(categorical(&candidates, &text_weights, rng));
                let image_weights: Vec<f64> = candidates
                    .iter()
                    .map(|&k| {
                        inverse_density_weight(euclidean(&texts[anchor], &images[k]), dim, clamp)
                    })
                    .collect();
                image_negs.push(categorical(&candidates, &image_weights, rng));
            }
        }
    }
    Ok(BatchNegatives { text: text_negs, image: image_negs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    fn dummy_points(b: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..b)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i % dim] = 1.0;
                v
            })
            .collect()
    }

    #[test]
    fn hardest_picks_the_strongest_non_positive() {
        // Anchor 0 scores its own text 0.9 and the others 0.1 and 0.8.
        let scores = Mat::from_rows(&[
            vec![0.9, 0.1, 0.8],
            vec![0.2, 0.9, 0.3],
            vec![0.25, 0.15, 0.9],
        ]);
        let points = dummy_points(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let negs = sample_negatives(
            NegStrategy::HardestInBatch,
            Some(&scores),
            &points,
            &points,
            50.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(negs.text[0], 2);
        // Column 0 without the diagonal is [0.2, 0.25]: image 2 wins.
        assert_eq!(negs.image[0], 2);
        assert_eq!(negs.text[1], 2);
    }

    #[test]
    fn hardest_ties_resolve_to_lowest_index() {
        let scores = Mat::from_rows(&[
            vec![0.9, 0.5, 0.5, 0.2],
            vec![0.1, 0.9, 0.0, 0.0],
            vec![0.1, 0.2, 0.9, 0.0],
            vec![0.1, 0.2, 0.3, 0.9],
        ]);
        let points = dummy_points(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let negs = sample_negatives(
            NegStrategy::HardestInBatch,
            Some(&scores),
            &points,
            &points,
            50.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(negs.text[0], 1);
    }

    #[test]
    fn all_tied_scores_fall_back_to_uniform() {
        let scores = Mat::zeros(4, 4);
        let points = dummy_points(4, 4);
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3000 {
            let negs = sample_negatives(
                NegStrategy::HardestInBatch,
                Some(&scores),
                &points,
                &points,
                50.0,
                &mut rng,
            )
            .unwrap();
            counts[negs.text[0]] += 1;
        }
        assert_eq!(counts[0], 0, "positive must never be picked");
        for &c in &counts[1..] {
            // Each of the three candidates should land near 1000 draws.
            assert!((700..1300).contains(&c), "counts = {counts:?}");
        }
    }

    #[test]
    fn equal_distances_split_evenly() {
        // Both text candidates are orthogonal to the anchor image, so they
        // sit at identical distance sqrt(2).
        let images = vec![unit(vec![1.0, 0.0, 0.0]); 3];
        let texts = vec![
            unit(vec![1.0, 0.0, 0.0]),
            unit(vec![0.0, 1.0, 0.0]),
            unit(vec![0.0, 0.0, 1.0]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let negs = sample_negatives(
                NegStrategy::DistanceWeighted,
                None,
                &images,
                &texts,
                50.0,
                &mut rng,
            )
            .unwrap();
            counts[negs.text[0]] += 1;
        }
        assert_eq!(counts[0], 0);
        // Chi-square with one degree of freedom; 6.63 is the 1% cutoff.
        let expected = draws as f64 / 2.0;
        let chi2 = (counts[1] as f64 - expected).powi(2) / expected
            + (counts[2] as f64 - expected).powi(2) / expected;
        assert!(chi2 < 6.63, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn planted_spread_matches_inverse_density_weights() {
        // Candidates at three distinct angles from the anchor; empirical
        // pick rates must track the clamped inverse-density weights.
        let dim = 8;
        let mut anchor = vec![0.0; dim];
        anchor[0] = 1.0;
        let angled = |theta: f64| {
            let mut v = vec![0.0; dim];
            v[0] = theta.cos();
            v[1] = theta.sin();
            v
        };
        let images = vec![anchor.clone(); 4];
        let texts = vec![anchor.clone(), angled(0.4), angled(1.2), angled(2.4)];
        let clamp = 50.0;
        let weights: Vec<f64> = texts[1..]
            .iter()
            .map(|t| {
                let d = euclidean(&anchor, t);
                inverse_density_weight(d, dim, clamp)
            })
            .collect();
        let total: f64 = weights.iter().sum();

        let draws = 20_000;
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..draws {
            let negs = sample_negatives(
                NegStrategy::DistanceWeighted,
                None,
                &images,
                &texts,
                clamp,
                &mut rng,
            )
            .unwrap();
            counts[negs.text[0]] += 1;
        }
        assert_eq!(counts[0], 0);
        for (idx, &w) in weights.iter().enumerate() {
            let p = w / total;
            let mean = draws as f64 * p;
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            let observed = counts[idx + 1] as f64;
            assert!(
                (observed - mean).abs() <= 3.0 * sigma,
                "candidate {idx}: observed {observed}, expected {mean} +- {sigma}"
            );
        }
    }

    #[test]
    fn identical_points_degenerate_to_uniform() {
        // Every candidate at distance zero gets the same clamped weight.
        let points = vec![unit(vec![1.0, 1.0]); 4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 4];
        for _ in 0..3000 {
            let negs = sample_negatives(
                NegStrategy::DistanceWeighted,
                None,
                &points,
                &points,
                50.0,
                &mut rng,
            )
            .unwrap();
            counts[negs.image[2]] += 1;
        }
        assert_eq!(counts[2], 0);
        for (idx, &c) in counts.iter().enumerate() {
            if idx != 2 {
                assert!((700..1300).contains(&c), "counts = {counts:?}");
            }
        }
    }

    #[test]
    fn tiny_batches_are_rejected() {
        let points = dummy_points(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_negatives(
            NegStrategy::DistanceWeighted,
            None,
            &points,
            &points,
            50.0,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn hardest_without_scores_is_an_error() {
        let points = dummy_points(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_negatives(
            NegStrategy::HardestInBatch,
            None,
            &points,
            &points,
            50.0,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn weight_clamps_at_both_extremes() {
        assert_eq!(inverse_density_weight(0.0, 32, 50.0), 50.0);
        assert_eq!(inverse_density_weight(2.0, 32, 50.0), 50.0);
        // Mid-range distances on a high-dimensional sphere are the density
        // bulk, so their inverse weight stays modest.
        let w = inverse_density_weight(1.414, 32, 50.0);
        assert!(w < 50.0 && w > 0.0, "w = {w}");
    }

    proptest! {
        #[test]
        fn positives_are_never_selected(
            seed in 0u64..500,
            b in 2usize..7,
            hardest_mode in proptest::bool::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 5;
            let points: Vec<Vec<f64>> = (0..b)
                .map(|_| unit((0..dim).map(|_| rng.gen::<f64>() - 0.5).collect()))
                .collect();
            let mut scores = Mat::zeros(b, b);
            for i in 0..b {
                for j in 0..b {
                    scores.set(i, j, rng.gen::<f64>());
                }
            }
            let strategy = if hardest_mode {
                NegStrategy::HardestInBatch
            } else {
                NegStrategy::DistanceWeighted
            };
            let negs =
                sample_negatives(strategy, Some(&scores), &points, &points, 50.0, &mut rng)
                    .unwrap();
            for anchor in 0..b {
                prop_assert_ne!(negs.text[anchor], anchor);
                prop_assert_ne!(negs.image[anchor], anchor);
                prop_assert!(negs.text[anchor] < b);
                prop_assert!(negs.image[anchor] < b);
            }
        }
    }
}
