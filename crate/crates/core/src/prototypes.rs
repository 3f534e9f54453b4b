//! Iterative style-prototype banks.
//!
//! Each epoch's weighted k-means yields pseudo prototypes (the centers).
//! The bank folds them into a running average with a per-epoch feedback
//! weight: at local update m' the stored prototypes move by
//!
//! ```text
//! mu <- mu + (w * mu_hat - mu) / m'
//! ```
//!
//! which keeps mu equal to the unrolled average (1/m) * sum_t w_t*mu_hat_t
//! of everything blended so far. The feedback weight reacts to validation
//! retrieval: with rsum_history = [r_{j0}, ..., r_{j-1}],
//!
//! ```text
//! w = 1 + (r_{j-1} - r_{j-2}) / mean(rsum_history)
//! ```
//!
//! so an improving run amplifies the newest pseudo prototypes and a
//! regressing run damps them. The first two updates have no two-epoch
//! trend yet and use w = 1.
//!
//! The counter m is local to the averaging run: it starts at the first
//! blend regardless of which training epoch that happens in, and warm
//! starting each epoch's k-means from the blended prototypes keeps cluster
//! k of one epoch seeded from cluster k of the previous one, so indices
//! stay comparable across epochs.

use rand::Rng;

use crate::clustering::{kmeans_pp_init, weighted_kmeans, ClusterState, ColumnInstance};
use crate::embeddings::Modality;
use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub modality: Modality,
    /// Blended prototypes, one per row (K x P).
    pub prototypes: Mat,
    /// Number of pseudo-prototype blends folded in so far.
    pub m: usize,
    /// Validation rSum per epoch from the init epoch onward.
    pub rsum_history: Vec<f64>,
    /// Feedback weight applied at each blend; length equals `m`.
    pub weight_history: Vec<f64>,
    /// Pseudo prototypes blended at each update; length equals `m`.
    pub pseudo_history: Vec<Mat>,
    /// First epoch with prototype state.
    pub j0: usize,
    /// Total scheduled epochs.
    pub j_total: usize,
}

/// Controls for ablated prototype maintenance.
#[derive(Debug, Clone, Copy)]
pub struct UpdateOptions {
    /// When false, each epoch re-seeds and the bank keeps only the fresh
    /// centers instead of a running average.
    pub iterative: bool,
    /// When false, the feedback weight is pinned to 1.
    pub feedback: bool,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        UpdateOptions { iterative: true, feedback: true }
    }
}

impl PrototypeBank {
    pub fn new(modality: Modality, k: usize, p: usize, j0: usize, j_total: usize) -> Self {
        PrototypeBank {
            modality,
            prototypes: Mat::zeros(k, p),
            m: 0,
            rsum_history: Vec::new(),
            weight_history: Vec::new(),
            pseudo_history: Vec::new(),
            j0,
            j_total,
        }
    }

    pub fn k(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn p(&self) -> usize {
        self.prototypes.cols()
    }

    /// First epoch at which blending (rather than initialization) happens.
    pub fn j1(&self) -> usize {
        self.j0 + 1
    }

    pub fn record_rsum(&mut self, rsum: f64) {
        self.rsum_history.push(rsum);
    }

    /// Drop the running average but keep the rSum record. Used by the
    /// fresh-prototypes ablation between epochs.
    pub fn reset_average(&mut self) {
        self.m = 0;
        self.weight_history.clear();
        self.pseudo_history.clear();
        for v in self.prototypes.as_mut_slice() {
            *v = 0.0;
        }
    }

    /// Reference value for the running average: (1/m) * sum_t w_t * mu_hat_t
    /// recomputed from the recorded history.
    pub fn unrolled_average(&self) -> Result<Mat> {
        if self.m == 0 {
            return Err(Error::Numeric("no blends recorded".into()));
        }
        let mut acc = Mat::zeros(self.k(), self.p());
        for (pseudo, &w) in self.pseudo_history.iter().zip(&self.weight_history) {
            for (a, &v) in acc.as_mut_slice().iter_mut().zip(pseudo.as_slice()) {
                *a += w * v;
            }
        }
        let inv = 1.0 / self.m as f64;
        for a in acc.as_mut_slice() {
            *a *= inv;
        }
        Ok(acc)
    }
}

/// Performance-feedback weight from the recorded validation rSums.
pub fn feedback_weight(rsum_history: &[f64]) -> Result<f64> {
    if rsum_history.len() < 2 {
        return Ok(1.0);
    }
    let n = rsum_history.len() as f64;
    let mean = rsum_history.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::Numeric("rSum history has zero mean".into()));
    }
    let last = rsum_history[rsum_history.len() - 1];
    let prev = rsum_history[rsum_history.len() - 2];
    let w = 1.0 + (last - prev) / mean;
    if !w.is_finite() {
        return Err(Error::Numeric(format!("non-finite feedback weight {w}")));
    }
    Ok(w)
}

/// Fold one epoch's pseudo prototypes into the bank's running average.
pub fn blend_prototype(bank: &mut PrototypeBank, pseudo: &Mat, w: f64) -> Result<()> {
    if pseudo.rows() != bank.k() || pseudo.cols() != bank.p() {
        return Err(Error::Shape(format!(
            "pseudo prototypes are {}x{}, bank holds {}x{}",
            pseudo.rows(),
            pseudo.cols(),
            bank.k(),
            bank.p()
        )));
    }
    if !w.is_finite() {
        return Err(Error::Numeric(format!("non-finite blend weight {w}")));
    }
    let m_next = bank.m + 1;
    let inv = 1.0 / m_next as f64;
    for (mu, &hat) in bank.prototypes.as_mut_slice().iter_mut().zip(pseudo.as_slice()) {
        *mu += (w * hat - *mu) * inv;
    }
    bank.m = m_next;
    bank.weight_history.push(w);
    bank.pseudo_history.push(pseudo.clone());
    Ok(())
}

/// One epoch-end prototype maintenance step: cluster the pooled column
/// instances (warm started from the bank once it holds an average), then
/// blend the resulting centers with the feedback weight. Returns the
/// cluster state so the caller can freeze it for the next epoch's
/// compactness loss.
pub fn epoch_update<R: Rng>(
    bank: &mut PrototypeBank,
    epoch_instances: &[ColumnInstance],
    k: usize,
    max_iter: usize,
    tol: f64,
    rng: &mut R,
    options: UpdateOptions,
) -> Result<ClusterState> {
    if k != bank.k() {
        return Err(Error::Config(format!("bank holds {} clusters, update asked for {k}", bank.k())));
    }
    let warm = options.iterative && bank.m >= 1;
    let init = if warm {
        bank.prototypes.clone()
    } else {
        kmeans_pp_init(epoch_instances, k, rng)?
    };
    let state = weighted_kmeans(epoch_instances, k, &init, max_iter, tol)?;
    if options.iterative {
        let w = if options.feedback { feedback_weight(&bank.rsum_history)? } else { 1.0 };
        blend_prototype(bank, &state.centers, w)?;
    } else {
        bank.reset_average();
        blend_prototype(bank, &state.centers, 1.0)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_history_gives_unit_weight() {
        assert_eq!(feedback_weight(&[5.0, 5.0, 5.0]).unwrap(), 1.0);
    }

    #[test]
    fn improving_history_amplifies() {
        let w = feedback_weight(&[400.0, 410.0]).unwrap();
        assert!((w - (1.0 + 10.0 / 405.0)).abs() < 1e-12, "w = {w}");
    }

    #[test]
    fn regressing_history_damps() {
        let w = feedback_weight(&[410.0, 400.0]).unwrap();
        assert!((w - (1.0 - 10.0 / 405.0)).abs() < 1e-12, "w = {w}");
    }

    #[test]
    fn short_history_gives_unit_weight() {
        assert_eq!(feedback_weight(&[]).unwrap(), 1.0);
        assert_eq!(feedback_weight(&[123.0]).unwrap(), 1.0);
    }

    #[test]
    fn zero_mean_history_is_rejected() {
        assert!(feedback_weight(&[0.0, 0.0]).is_err());
        assert!(feedback_weight(&[-5.0, 5.0]).is_err());
    }

    #[test]
    fn second_blend_halves_the_step() {
        // mu = [0], pseudo = [2], w = 1 at m' = 2: mu becomes [1].
        let mut bank = PrototypeBank::new(Modality::Image, 1, 1, 1, 5);
        blend_prototype(&mut bank, &Mat::from_rows(&[vec![0.0]]), 1.0).unwrap();
        blend_prototype(&mut bank, &Mat::from_rows(&[vec![2.0]]), 1.0).unwrap();
        assert_eq!(bank.prototypes.row(0), &[1.0]);
        assert_eq!(bank.m, 2);
    }

    #[test]
    fn first_blend_initializes_to_weighted_pseudo() {
        let mut bank = PrototypeBank::new(Modality::Text, 1, 2, 1, 5);
        blend_prototype(&mut bank, &Mat::from_rows(&[vec![3.0, -1.0]]), 1.0).unwrap();
        assert_eq!(bank.prototypes.row(0), &[3.0, -1.0]);
        assert_eq!(bank.m, 1);
        assert_eq!(bank.weight_history, vec![1.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut bank = PrototypeBank::new(Modality::Image, 2, 3, 1, 5);
        assert!(blend_prototype(&mut bank, &Mat::zeros(2, 4), 1.0).is_err());
        assert!(blend_prototype(&mut bank, &Mat::zeros(3, 3), 1.0).is_err());
    }

    fn blob_instances(seed: u64, shift: f64) -> Vec<ColumnInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 0..40 {
            let base = if i % 2 == 0 { -4.0 } else { 4.0 };
            out.push(ColumnInstance {
                values: vec![base + shift + 0.1 * rng.gen_range(-1.0..1.0)],
                column_index: i,
                instance_id: 0,
                weight: 1.0,
            });
        }
        out
    }

    #[test]
    fn warm_start_preserves_cluster_labels() {
        let mut bank = PrototypeBank::new(Modality::Image, 2, 1, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let first = epoch_update(
            &mut bank,
            &blob_instances(1, 0.0),
            2,
            50,
            1e-9,
            &mut rng,
            UpdateOptions::default(),
        )
        .unwrap();
        bank.record_rsum(100.0);
        let second = epoch_update(
            &mut bank,
            &blob_instances(2, 0.5),
            2,
            50,
            1e-9,
            &mut rng,
            UpdateOptions::default(),
        )
        .unwrap();
        // The blobs moved by +0.5; each index should still track the same blob.
        for k in 0..2 {
            assert!(
                (first.centers.get(k, 0) - second.centers.get(k, 0)).abs() < 1.0,
                "cluster {k} jumped: {} -> {}",
                first.centers.get(k, 0),
                second.centers.get(k, 0)
            );
        }
        assert_eq!(bank.m, 2);
    }

    #[test]
    fn non_iterative_update_keeps_fresh_centers_only() {
        let mut bank = PrototypeBank::new(Modality::Image, 2, 1, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let opts = UpdateOptions { iterative: false, feedback: false };
        for round in 0..3 {
            let state = epoch_update(
                &mut bank,
                &blob_instances(round, round as f64),
                2,
                50,
                1e-9,
                &mut rng,
                opts,
            )
            .unwrap();
            assert_eq!(bank.m, 1, "fresh mode must not accumulate");
            assert_eq!(bank.prototypes, state.centers);
        }
    }

    proptest! {
        // The incremental blend equals the unrolled weighted average.
        #[test]
        fn blend_matches_unrolled_average(
            seed in 0u64..300,
            blends in 1usize..12,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = PrototypeBank::new(Modality::Image, 2, 3, 1, blends + 1);
            for _ in 0..blends {
                let pseudo = Mat::from_vec(
                    2,
                    3,
                    (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                ).unwrap();
                let w = rng.gen_range(0.5..1.5);
                blend_prototype(&mut bank, &pseudo, w).unwrap();
            }
            let reference = bank.unrolled_average().unwrap();
            for (a, b) in bank.prototypes.as_slice().iter().zip(reference.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
            prop_assert_eq!(bank.weight_history.len(), bank.m);
        }
    }
}
