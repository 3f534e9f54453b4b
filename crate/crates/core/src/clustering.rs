//! Weighted k-means over feature-column instances.
//!
//! An instance is one column of one embedding set: for image tokens
//! (n_v x D) column d gives a vector in R^{n_v}, and pooling those columns
//! across the corpus yields the point cloud this module clusters. Each
//! instance carries the pseudo style probability of its column as a
//! weight, so style-dominated columns pull the centers and semantic
//! columns barely register.
//!
//! Assignment uses plain squared Euclidean distance; weights enter the
//! center update (weighted mean) and the energy
//! sum_i w_i * ||x_i - mu_{a(i)}||^2. Both steps are exact alternating
//! minimization, so the recorded energy history never increases. A cluster
//! whose total member weight hits zero is re-seeded from the instance with
//! the largest weighted distance to its own center, lowest index on ties.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mat::{squared_distance, Mat};

#[derive(Debug, Clone)]
pub struct ColumnInstance {
    pub values: Vec<f64>,
    pub column_index: usize,
    pub instance_id: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    pub centers: Mat,
    pub assignment: Vec<usize>,
    pub energy: f64,
    pub iterations_run: usize,
    /// Energy after init, then after every assign/update cycle.
    pub energy_history: Vec<f64>,
}

/// Default iteration cap for the alternating loop.
pub const DEFAULT_MAX_ITER: usize = 50;
/// Default absolute energy-improvement threshold for convergence.
pub const DEFAULT_TOL: f64 = 1e-6;

fn validate_instances(instances: &[ColumnInstance], k: usize) -> Result<usize> {
    if instances.is_empty() {
        return Err(Error::Shape("clustering needs at least one instance".into()));
    }
    if k == 0 {
        return Err(Error::Config("cluster count must be positive".into()));
    }
    if k > instances.len() {
        return Err(Error::Config(format!(
            "cluster count {k} exceeds instance count {}",
            instances.len()
        )));
    }
    let p = instances[0].values.len();
    let mut total_weight = 0.0;
    for inst in instances {
        if inst.values.len() != p {
            return Err(Error::Shape("instances have inconsistent dimensions".into()));
        }
        if !inst.weight.is_finite() || inst.weight < 0.0 {
            return Err(Error::Numeric(format!("bad instance weight {}", inst.weight)));
        }
        total_weight += inst.weight;
    }
    if total_weight <= 0.0 {
        return Err(Error::Numeric("all instance weights are zero".into()));
    }
    Ok(p)
}

/// Nearest-center assignment by squared Euclidean distance, ties to the
/// lowest cluster index. Weights play no role here.
pub fn assign_instances(instances: &[ColumnInstance], centers: &Mat) -> Vec<usize> {
    instances
        .iter()
        .map(|inst| {
            let mut best = 0;
            let mut best_d = squared_distance(&inst.values, centers.row(0));
            for kk in 1..centers.rows() {
                let d = squared_distance(&inst.values, centers.row(kk));
                if d < best_d {
                    best_d = d;
                    best = kk;
                }
            }
            best
        })
        .collect()
}

/// Weighted-mean center update. Clusters whose total member weight is zero
/// are re-seeded from the instance with the largest weighted distance to
/// its current center (lowest instance index on ties, each instance used
/// at most once per update). Returns the new centers and the indices of
/// re-seeded clusters.
pub fn update_centers(
    instances: &[ColumnInstance],
    assignment: &[usize],
    k: usize,
) -> Result<(Mat, Vec<usize>)> {
    let p = validate_instances(instances, k)?;
    if assignment.len() != instances.len() {
        return Err(Error::Shape("assignment length does not match instances".into()));
    }
    let mut sums = Mat::zeros(k, p);
    let mut masses = vec![0.0; k];
    for (inst, &a) in instances.iter().zip(assignment) {
        if a >= k {
            return Err(Error::Shape(format!("assignment index {a} out of range")));
        }
        masses[a] += inst.weight;
        for (s, &v) in sums.row_mut(a).iter_mut().zip(&inst.values) {
            *s += inst.weight * v;
        }
    }
    let mut centers = Mat::zeros(k, p);
    let mut empty = Vec::new();
    for kk in 0..k {
        if masses[kk] > 0.0 {
            for (c, &s) in centers.row_mut(kk).iter_mut().zip(sums.row(kk)) {
                *c = s / masses[kk];
            }
        } else {
            empty.push(kk);
        }
    }
    if empty.is_empty() {
        return Ok((centers, empty));
    }
    // Rank instances by weighted distance to their own (freshly updated)
    // center; every instance's cluster is nonempty, so that center exists.
    let mut candidates: Vec<usize> = (0..instances.len())
        .filter(|&i| masses[assignment[i]] > 0.0)
        .collect();
    candidates.sort_by(|&a, &b| {
        let da = instances[a].weight
            * squared_distance(&instances[a].values, centers.row(assignment[a]));
        let db = instances[b].weight
            * squared_distance(&instances[b].values, centers.row(assignment[b]));
        db.partial_cmp(&da).expect("NaN distance").then(a.cmp(&b))
    });
    for (slot, &kk) in empty.iter().enumerate() {
        let donor = candidates.get(slot).copied().ok_or_else(|| {
            Error::Numeric("not enough instances to re-seed empty clusters".into())
        })?;
        let row: Vec<f64> = instances[donor].values.clone();
        centers.row_mut(kk).copy_from_slice(&row);
    }
    Ok((centers, empty))
}

/// Weighted clustering energy under a fixed assignment.
pub fn cluster_energy(instances: &[ColumnInstance], assignment: &[usize], centers: &Mat) -> f64 {
    instances
        .iter()
        .zip(assignment)
        .map(|(inst, &a)| inst.weight * squared_distance(&inst.values, centers.row(a)))
        .sum()
}

/// Alternating weighted k-means from the given initial centers. Runs until
/// the energy improvement drops below `tol` or `max_iter` cycles elapse.
pub fn weighted_kmeans(
    instances: &[ColumnInstance],
    k: usize,
    init_centers: &Mat,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterState> {
    let p = validate_instances(instances, k)?;
    if init_centers.rows() != k || init_centers.cols() != p {
        return Err(Error::Shape(format!(
            "init centers are {}x{}, expected {k}x{p}",
            init_centers.rows(),
            init_centers.cols()
        )));
    }
    let mut centers = init_centers.clone();
    let mut assignment = assign_instances(instances, &centers);
    let mut energy = cluster_energy(instances, &assignment, &centers);
    let mut energy_history = vec![energy];
    let mut iterations_run = 0;
    for _ in 0..max_iter {
        let (new_centers, _reseeded) = update_centers(instances, &assignment, k)?;
        centers = new_centers;
        assignment = assign_instances(instances, &centers);
        let new_energy = cluster_energy(instances, &assignment, &centers);
        iterations_run += 1;
        energy_history.push(new_energy);
        let improvement = energy - new_energy;
        energy = new_energy;
        if improvement < tol {
            break;
        }
    }
    Ok(ClusterState { centers, assignment, energy, iterations_run, energy_history })
}

/// Weighted k-means++ seeding: the first center is drawn proportionally to
/// instance weight, later ones proportionally to weight times squared
/// distance to the nearest chosen center. Falls back to the lowest-index
/// unchosen instance when all masses vanish (e.g. duplicates).
pub fn kmeans_pp_init<R: Rng>(
    instances: &[ColumnInstance],
    k: usize,
    rng: &mut R,
) -> Result<Mat> {
    let p = validate_instances(instances, k)?;
    let mut centers = Mat::zeros(k, p);
    let mut chosen = vec![false; instances.len()];
    let mut masses: Vec<f64> = instances.iter().map(|i| i.weight).collect();
    for slot in 0..k {
        let total: f64 = masses.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = masses.len() - 1;
            for (i, &m) in masses.iter().enumerate() {
                if m <= 0.0 {
                    continue;
                }
                if r < m {
                    pick = i;
                    break;
                }
                r -= m;
            }
            pick
        } else {
            (0..instances.len())
                .find(|&i| !chosen[i])
                .ok_or_else(|| Error::Numeric("ran out of seeding candidates".into()))?
        };
        chosen[pick] = true;
        centers.row_mut(slot).copy_from_slice(&instances[pick].values);
        // Refresh masses to weight * distance to the nearest chosen center.
        for (i, inst) in instances.iter().enumerate() {
            let d = squared_distance(&inst.values, centers.row(slot));
            let cur = inst.weight * d;
            if slot == 0 || cur < masses[i] {
                masses[i] = cur;
            }
            if chosen[i] {
                masses[i] = 0.0;
            }
        }
    }
    Ok(centers)
}

/// Algorithm-R reservoir sample with a fixed cap; the relative order of
/// kept items follows the stream.
pub fn reservoir_sample<T, R: Rng>(
    stream: impl IntoIterator<Item = T>,
    cap: usize,
    rng: &mut R,
) -> Vec<T> {
    let mut kept: Vec<T> = Vec::with_capacity(cap.min(1024));
    for (i, item) in stream.into_iter().enumerate() {
        if kept.len() < cap {
            kept.push(item);
        } else {
            let j = rng.gen_range(0..=i);
            if j < cap {
                kept[j] = item;
            }
        }
    }
    kept
}

/// Explode a token matrix into its per-column instances, weighting column
/// d by `column_weights[d]`.
pub fn column_instances(
    tokens: &Mat,
    instance_id: usize,
    column_weights: &[f64],
) -> Result<Vec<ColumnInstance>> {
    if column_weights.len() != tokens.cols() {
        return Err(Error::Shape(format!(
            "{} column weights for {} columns",
            column_weights.len(),
            tokens.cols()
        )));
    }
    let mut out = Vec::with_capacity(tokens.cols());
    for d in 0..tokens.cols() {
        let values: Vec<f64> = (0..tokens.rows()).map(|i| tokens.get(i, d)).collect();
        out.push(ColumnInstance { values, column_index: d, instance_id, weight: column_weights[d] });
    }
    Ok(out)
}
