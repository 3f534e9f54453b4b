//! End-to-end training: configuration, the epoch schedule, gradient
//! steps, and the per-epoch probability/prototype maintenance.
//!
//! Epochs are numbered 1..=J. Until epoch j0 the model trains on the
//! plain triplet loss with all-ones column weights. At the end of every
//! epoch from j0 on, the pseudo probabilities are recomputed from the
//! training split, both prototype banks fold in that epoch's cluster
//! centers (weighted by the validation-rSum feedback), per-instance
//! semantic weights are refreshed against the blended prototypes, and the
//! raw centers plus a fresh column assignment are frozen for the next
//! epoch's compactness term. Validation rSum is evaluated after the
//! update, so the feedback weight at epoch j reflects the prototypes of
//! epochs up to j-1.

pub mod backward;
pub mod loss;
pub mod negatives;

pub use backward::{batch_loss, eval_batch, BatchContext, BatchEval, CompactnessSnapshot};
pub use loss::{clustering_loss_term, total_loss, triplet_loss};
pub use negatives::{
    instance_embedding, inverse_density_weight, sample_negatives, BatchNegatives, NegStrategy,
};

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{column_instances, reservoir_sample, ColumnInstance};
use crate::corpus::Corpus;
use crate::embeddings::{l2_normalize, project, EmbeddingSet, Modality, ProjectionHead};
use crate::error::{Error, Result};
use crate::evaluation::{rsum_report, RetrievalReport, ScoringView};
use crate::interaction::pair_score;
use crate::mat::{squared_distance, Mat};
use crate::probability::{
    complement, epsilon_from_deltas, instance_semantic_probabilities, min_sq_distance,
    pseudo_semantic_probability, ModalityProbabilities, ProbabilityState, SignMode,
};
use crate::prototypes::{epoch_update, PrototypeBank, UpdateOptions};

/// Fraction of pairs held out for the validation rSum feedback.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// How the sigmoid scale for the prototype-distance estimator is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonMode {
    /// Per-epoch median of the squared prototype distances.
    Median,
    /// A fixed positive constant.
    Fixed(f64),
}

impl Default for EpsilonMode {
    fn default() -> Self {
        EpsilonMode::Median
    }
}

impl std::fmt::Display for EpsilonMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EpsilonMode::Median => write!(f, "median"),
            EpsilonMode::Fixed(x) => write!(f, "{x}"),
        }
    }
}

impl std::str::FromStr for EpsilonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(EpsilonMode::Median);
        }
        match s.parse::<f64>() {
            Ok(x) if x > 0.0 && x.is_finite() => Ok(EpsilonMode::Fixed(x)),
            _ => Err(Error::Config(format!(
                "epsilon mode must be \"median\" or a positive number, got {s:?}"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EpsilonModeWire {
    Number(f64),
    Text(String),
}

impl Serialize for EpsilonMode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EpsilonMode::Median => serializer.serialize_str("median"),
            EpsilonMode::Fixed(x) => serializer.serialize_f64(*x),
        }
    }
}

impl<'de> Deserialize<'de> for EpsilonMode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        match EpsilonModeWire::deserialize(deserializer)? {
            EpsilonModeWire::Number(x) if x > 0.0 && x.is_finite() => Ok(EpsilonMode::Fixed(x)),
            EpsilonModeWire::Number(x) => Err(serde::de::Error::custom(format!(
                "epsilon must be a positive finite number, got {x}"
            ))),
            EpsilonModeWire::Text(s) if s == "median" => Ok(EpsilonMode::Median),
            EpsilonModeWire::Text(s) => Err(serde::de::Error::custom(format!(
                "epsilon mode must be \"median\" or a positive number, got {s:?}"
            ))),
        }
    }
}

/// Switches that disable one piece of the machinery at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// No column weighting at all: plain alignment baseline.
    Wei,
    /// Pseudo probabilities used directly as weights; no prototypes, no
    /// compactness term.
    Pro,
    /// Fresh prototypes every epoch instead of the running average.
    Ite,
    /// Feedback weight pinned to one.
    Fed,
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ablation::Wei => write!(f, "wei"),
            Ablation::Pro => write!(f, "pro"),
            Ablation::Ite => write!(f, "ite"),
            Ablation::Fed => write!(f, "fed"),
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wei" => Ok(Ablation::Wei),
            "pro" => Ok(Ablation::Pro),
            "ite" => Ok(Ablation::Ite),
            "fed" => Ok(Ablation::Fed),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected wei, pro, ite or fed)"
            ))),
        }
    }
}

/// Training hyper-parameters. The defaults are the reference settings the
/// acceptance experiments run with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Triplet margin.
    pub alpha: f64,
    /// Compactness weight in the joint objective.
    pub omega_c: f64,
    /// First epoch with prototype state (1-based, strictly inside 1..J).
    pub j0: usize,
    /// Total epochs J.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Projection output dimension.
    pub d: usize,
    pub neg_strategy: NegStrategy,
    /// Weight cap for distance-weighted negative sampling.
    pub neg_clamp: f64,
    pub seed: u64,
    /// Style cluster count per modality.
    pub k: usize,
    pub epsilon_mode: EpsilonMode,
    pub sign_mode: SignMode,
    /// L2-normalize projected tokens before scoring.
    pub normalize_tokens: bool,
    /// Cap on column instances fed to one clustering pass.
    pub reservoir_cap: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub ablation: Option<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.2,
            omega_c: 5.0,
            j0: 3,
            epochs: 12,
            batch_size: 64,
            learning_rate: 2e-4,
            d: 32,
            neg_strategy: NegStrategy::DistanceWeighted,
            neg_clamp: 50.0,
            seed: 7,
            k: 8,
            epsilon_mode: EpsilonMode::Median,
            sign_mode: SignMode::NegatedExponent,
            normalize_tokens: true,
            reservoir_cap: 50_000,
            kmeans_max_iter: 50,
            kmeans_tol: 1e-6,
            ablation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.omega_c >= 0.0 && self.omega_c.is_finite()) {
            return Err(Error::Config(format!("omega_c must be nonnegative, got {}", self.omega_c)));
        }
        if self.j0 == 0 || self.j0 >= self.epochs {
            return Err(Error::Config(format!(
                "schedule needs 0 < j0 < epochs, got j0 = {} with {} epochs",
                self.j0, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.d == 0 {
            return Err(Error::Config("projection dimension d must be positive".into()));
        }
        if !(self.neg_clamp > 0.0 && self.neg_clamp.is_finite()) {
            return Err(Error::Config(format!("neg_clamp must be positive, got {}", self.neg_clamp)));
        }
        if self.k == 0 {
            return Err(Error::Config("cluster count k must be positive".into()));
        }
        if self.reservoir_cap < self.k {
            return Err(Error::Config(format!(
                "reservoir_cap {} cannot hold k = {} clusters",
                self.reservoir_cap, self.k
            )));
        }
        if let EpsilonMode::Fixed(x) = self.epsilon_mode {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::Config(format!("fixed epsilon must be positive, got {x}")));
            }
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::Config("kmeans_max_iter must be positive".into()));
        }
        if !(self.kmeans_tol >= 0.0 && self.kmeans_tol.is_finite()) {
            return Err(Error::Config(format!(
                "kmeans_tol must be nonnegative, got {}",
                self.kmeans_tol
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Epoch mean of the per-batch triplet loss.
    pub l_x: f64,
    /// Epoch mean of the per-batch compactness term.
    pub l_c: f64,
    /// Blend weight applied at this epoch's prototype update.
    pub w_applied: Option<f64>,
    /// Converged clustering energy, both modalities summed.
    pub energy: Option<f64>,
    /// Validation rSum.
    pub rsum: f64,
    pub recalls: RetrievalReport,
}

/// Full mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub head_image: ProjectionHead,
    pub head_text: ProjectionHead,
    pub bank_image: PrototypeBank,
    pub bank_text: PrototypeBank,
    pub probs: Option<ProbabilityState>,
    pub compactness: Option<CompactnessSnapshot>,
    /// Last completed epoch; 0 before training starts.
    pub epoch: usize,
    pub metrics: Vec<MetricsRecord>,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: seeded rng, one shared sparse initialization for both
    /// heads, and a seed-fixed validation split.
    ///
    /// Each projected dimension starts as a copy of one raw column (a
    /// random selector without replacement), shared across modalities.
    /// A dense random init would mix every raw column into every output
    /// and leave all dimensions statistically interchangeable, giving the
    /// per-dimension probability machinery nothing to tell apart; the
    /// selector carries raw-axis identity into model space the way a
    /// pretrained backbone's feature axes carry meaning, and training
    /// densifies the map from there.
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let n = corpus.pair_count();
        if n < 2 {
            return Err(Error::Config(format!("training needs at least two pairs, got {n}")));
        }
        if config.d > corpus.d {
            return Err(Error::Config(format!(
                "projection dimension {} exceeds the raw dimension {}",
                config.d, corpus.d
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // The corpus generator seeds the same way; put training on its own
        // stream so the two never replay each other's draws (with a shared
        // seed, the selector below would otherwise retrace the generator's
        // column sample pick for pick).
        rng.set_stream(1);
        let mut weight = Mat::zeros(corpus.d, config.d);
        let picks = rand::seq::index::sample(&mut rng, corpus.d, config.d);
        for (out_dim, raw_dim) in picks.iter().enumerate() {
            weight.set(raw_dim, out_dim, 1.0);
        }
        let head_image = ProjectionHead::new(Modality::Image, weight.clone());
        let head_text = ProjectionHead::new(Modality::Text, weight);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let val_n = ((n as f64 * VALIDATION_FRACTION).round() as usize).max(1);
        let val_ids: Vec<usize> = order[..val_n].to_vec();
        let train_ids: Vec<usize> = order[val_n..].to_vec();
        if train_ids.len() < 2 {
            return Err(Error::Config(format!(
                "{n} pairs leave only {} for training after the validation split",
                train_ids.len()
            )));
        }

        let bank_image =
            PrototypeBank::new(Modality::Image, config.k, corpus.n_v, config.j0, config.epochs);
        let bank_text =
            PrototypeBank::new(Modality::Text, config.k, corpus.n_t, config.j0, config.epochs);
        Ok(TrainState {
            config,
            head_image,
            head_text,
            bank_image,
            bank_text,
            probs: None,
            compactness: None,
            epoch: 0,
            metrics: Vec::new(),
            train_ids,
            val_ids,
            rng,
        })
    }

    fn weight_for(&self, modality: Modality, id: usize) -> Vec<f64> {
        match &self.probs {
            Some(probs) => probs.modality(modality).per_instance_semantic[id].clone(),
            None => vec![1.0; self.config.d],
        }
    }

    /// Retrieval report over the given pair ids with this state's heads
    /// and current weighting.
    pub fn report(&self, corpus: &Corpus, ids: &[usize]) -> Result<RetrievalReport> {
        let weights = corpus_weights(self, corpus)?;
        evaluate_ids(
            corpus,
            ids,
            &self.head_image,
            &self.head_text,
            self.config.normalize_tokens,
            weights.as_ref().map(|(v, t)| (v.as_slice(), t.as_slice())),
        )
    }
}

/// Per-instance evaluation weights for a corpus under this state's
/// weighting regime: none at all, one broadcast pseudo vector, or
/// prototype-derived per-instance probabilities. Derives everything from
/// the heads, prototypes and stored epsilon, so it works the same for a
/// live state and one loaded from a checkpoint, on any corpus.
pub fn corpus_weights(
    state: &TrainState,
    corpus: &Corpus,
) -> Result<Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> {
    let Some(probs) = &state.probs else { return Ok(None) };
    let n = corpus.pair_count();
    let (Some(epsilon_v), Some(epsilon_t)) = (probs.image.epsilon, probs.text.epsilon) else {
        return Ok(Some((
            vec![probs.image.pseudo_semantic.clone(); n],
            vec![probs.text.pseudo_semantic.clone(); n],
        )));
    };
    let per_modality = |sets: &[EmbeddingSet],
                        head: &ProjectionHead,
                        prototypes: &Mat,
                        epsilon: f64|
     -> Result<Vec<Vec<f64>>> {
        sets.iter()
            .map(|set| {
                // Same space the prototypes were fit in: projected, never
                // normalized.
                let projected = project_instance(set, head, false)?;
                instance_semantic_probabilities(
                    &projected.tokens,
                    prototypes,
                    epsilon,
                    state.config.sign_mode,
                )
            })
            .collect()
    };
    Ok(Some((
        per_modality(&corpus.images, &state.head_image, &state.bank_image.prototypes, epsilon_v)?,
        per_modality(&corpus.texts, &state.head_text, &state.bank_text.prototypes, epsilon_t)?,
    )))
}

/// Project one raw set into model space, normalizing when asked.
pub fn project_instance(
    set: &EmbeddingSet,
    head: &ProjectionHead,
    normalize: bool,
) -> Result<EmbeddingSet> {
    let projected = project(set, head)?;
    Ok(if normalize { l2_normalize(&projected).0 } else { projected })
}

/// Score the given pair ids against each other and compute the standard
/// report. `weights` are full corpus-indexed per-instance tables.
pub fn evaluate_ids(
    corpus: &Corpus,
    ids: &[usize],
    head_image: &ProjectionHead,
    head_text: &ProjectionHead,
    normalize: bool,
    weights: Option<(&[Vec<f64>], &[Vec<f64>])>,
) -> Result<RetrievalReport> {
    let mut images = Vec::with_capacity(ids.len());
    let mut texts = Vec::with_capacity(ids.len());
    for &id in ids {
        if id >= corpus.pair_count() {
            return Err(Error::Config(format!("pair id {id} outside the corpus")));
        }
        images.push(project_instance(&corpus.images[id], head_image, normalize)?.tokens);
        texts.push(project_instance(&corpus.texts[id], head_text, normalize)?.tokens);
    }
    let (weights_v, weights_t) = match weights {
        Some((wv, wt)) => (
            Some(ids.iter().map(|&id| wv[id].clone()).collect::<Vec<_>>()),
            Some(ids.iter().map(|&id| wt[id].clone()).collect::<Vec<_>>()),
        ),
        None => (None, None),
    };
    let view = ScoringView {
        images: &images,
        texts: &texts,
        weights_v: weights_v.as_deref(),
        weights_t: weights_t.as_deref(),
    };
    rsum_report(&view.score_matrix()?)
}

/// Split ids into training batches; a trailing singleton is folded into
/// the previous batch so every batch can mine a negative.
fn batches_of(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out[out.len() - 1].len() == 1 {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

/// One gradient step over one batch.
fn step(state: &mut TrainState, corpus: &Corpus, batch: &[usize], epoch: usize) -> Result<BatchEval> {
    let config = &state.config;
    let images: Vec<&EmbeddingSet> = batch.iter().map(|&id| &corpus.images[id]).collect();
    let texts: Vec<&EmbeddingSet> = batch.iter().map(|&id| &corpus.texts[id]).collect();
    let weights_image: Vec<Vec<f64>> =
        batch.iter().map(|&id| state.weight_for(Modality::Image, id)).collect();
    let weights_text: Vec<Vec<f64>> =
        batch.iter().map(|&id| state.weight_for(Modality::Text, id)).collect();

    // Geometry for negative mining under the current heads.
    let projected_v: Vec<Mat> = images
        .iter()
        .map(|set| Ok(project_instance(set, &state.head_image, config.normalize_tokens)?.tokens))
        .collect::<Result<_>>()?;
    let projected_t: Vec<Mat> = texts
        .iter()
        .map(|set| Ok(project_instance(set, &state.head_text, config.normalize_tokens)?.tokens))
        .collect::<Result<_>>()?;
    let scores = match config.neg_strategy {
        NegStrategy::HardestInBatch => {
            let b = batch.len();
            let mut s = Mat::zeros(b, b);
            for i in 0..b {
                for j in 0..b {
                    s.set(
                        i,
                        j,
                        pair_score(&projected_v[i], &projected_t[j], &weights_image[i], &weights_text[j])?,
                    );
                }
            }
            Some(s)
        }
        NegStrategy::DistanceWeighted => None,
    };
    let points_v: Vec<Vec<f64>> = projected_v.iter().map(instance_embedding).collect();
    let points_t: Vec<Vec<f64>> = projected_t.iter().map(instance_embedding).collect();
    let negatives = sample_negatives(
        config.neg_strategy,
        scores.as_ref(),
        &points_v,
        &points_t,
        config.neg_clamp,
        &mut state.rng,
    )?;

    let ctx = BatchContext {
        images,
        texts,
        weights_image,
        weights_text,
        compactness: state.compactness.as_ref(),
        alpha: config.alpha,
        omega_c: config.omega_c,
        epoch,
        j0: config.j0,
        normalize: config.normalize_tokens,
    };
    let eval = eval_batch(&ctx, &state.head_image, &state.head_text, &negatives)?;

    let lr = config.learning_rate;
    for (w, g) in state.head_image.weight.as_mut_slice().iter_mut().zip(eval.grad_image.as_slice())
    {
        *w -= lr * g;
    }
    for (w, g) in state.head_text.weight.as_mut_slice().iter_mut().zip(eval.grad_text.as_slice()) {
        *w -= lr * g;
    }
    if !state.head_image.weight.all_finite() || !state.head_text.weight.all_finite() {
        return Err(Error::Numeric(format!("head weights went non-finite at epoch {epoch}")));
    }
    Ok(eval)
}

/// Nearest frozen center per column of one instance, ties to the lowest
/// cluster index.
fn column_assignment(tokens: &Mat, centers: &Mat) -> Vec<usize> {
    let mut column = vec![0.0; tokens.rows()];
    (0..tokens.cols())
        .map(|d| {
            for i in 0..tokens.rows() {
                column[i] = tokens.get(i, d);
            }
            let mut best = 0;
            let mut best_d = squared_distance(&column, centers.row(0));
            for k in 1..centers.rows() {
                let dist = squared_distance(&column, centers.row(k));
                if dist < best_d {
                    best_d = dist;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Epoch-end maintenance: recompute probabilities, update prototypes,
/// refresh per-instance weights, and freeze the next epoch's compactness
/// snapshot. Returns (blend weight, clustering energy) when clustering
/// ran.
fn epoch_end(
    state: &mut TrainState,
    corpus: &Corpus,
    epoch: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    let config = state.config.clone();
    if epoch < config.j0 || config.ablation == Some(Ablation::Wei) {
        return Ok((None, None));
    }

    // Project every instance once under the freshly stepped heads. The
    // probability and clustering machinery reads plain projected tokens:
    // sign statistics don't change under per-token normalization, and the
    // style manifold the prototypes chase lives in the linear space, where
    // a heavily stylized instance actually looks heavy.
    let proj_v: Vec<EmbeddingSet> = corpus
        .images
        .iter()
        .map(|set| project_instance(set, &state.head_image, false))
        .collect::<Result<_>>()?;
    let proj_t: Vec<EmbeddingSet> = corpus
        .texts
        .iter()
        .map(|set| project_instance(set, &state.head_text, false))
        .collect::<Result<_>>()?;

    let train_pairs: Vec<(&EmbeddingSet, &EmbeddingSet)> =
        state.train_ids.iter().map(|&id| (&proj_v[id], &proj_t[id])).collect();
    let pseudo_semantic = pseudo_semantic_probability(&train_pairs)?;
    let pseudo_style = complement(&pseudo_semantic)?;

    if config.ablation == Some(Ablation::Pro) {
        let n = corpus.pair_count();
        let broadcast = vec![pseudo_semantic.clone(); n];
        state.probs = Some(ProbabilityState {
            sign_mode: config.sign_mode,
            epoch,
            image: ModalityProbabilities {
                pseudo_semantic: pseudo_semantic.clone(),
                pseudo_style: pseudo_style.clone(),
                epsilon: None,
                per_instance_semantic: broadcast.clone(),
            },
            text: ModalityProbabilities {
                pseudo_semantic,
                pseudo_style,
                epsilon: None,
                per_instance_semantic: broadcast,
            },
        });
        return Ok((None, None));
    }

    // Style-dominated columns should steer the clustering; if the corpus
    // has no style mass at all, cluster uniformly instead of failing.
    let cluster_weights = if pseudo_style.iter().sum::<f64>() > 0.0 {
        pseudo_style.clone()
    } else {
        vec![1.0; config.d]
    };
    let options = UpdateOptions {
        iterative: config.ablation != Some(Ablation::Ite),
        feedback: config.ablation != Some(Ablation::Fed),
    };

    let run_modality = |bank: &mut PrototypeBank,
                            sets: &[EmbeddingSet],
                            rng: &mut ChaCha8Rng|
     -> Result<crate::clustering::ClusterState> {
        let stream = state.train_ids.iter().flat_map(|&id| {
            column_instances(&sets[id].tokens, id, &cluster_weights).expect("weights sized")
        });
        let sample: Vec<ColumnInstance> = reservoir_sample(stream, config.reservoir_cap, rng);
        epoch_update(
            bank,
            &sample,
            config.k,
            config.kmeans_max_iter,
            config.kmeans_tol,
            rng,
            options,
        )
    };
    // The borrow of train_ids inside the closure is immutable; split the
    // rng out so the bank update can still mutate state.
    let mut rng = state.rng.clone();
    let cluster_v = run_modality(&mut state.bank_image, &proj_v, &mut rng)?;
    let cluster_t = run_modality(&mut state.bank_text, &proj_t, &mut rng)?;
    state.rng = rng;

    let w_applied = state.bank_image.weight_history.last().copied();
    let energy = Some(cluster_v.energy + cluster_t.energy);

    // Per-modality epsilon from the training columns, then per-instance
    // semantic weights for every instance against the blended prototypes.
    let modality_probs = |sets: &[EmbeddingSet], bank: &PrototypeBank| -> Result<(f64, Vec<Vec<f64>>)> {
        let epsilon = match config.epsilon_mode {
            EpsilonMode::Fixed(x) => x,
            EpsilonMode::Median => {
                let mut deltas = Vec::with_capacity(state.train_ids.len() * config.d);
                let mut column = vec![0.0; sets[0].n_tokens()];
                for &id in &state.train_ids {
                    let tokens = &sets[id].tokens;
                    for d in 0..tokens.cols() {
                        for i in 0..tokens.rows() {
                            column[i] = tokens.get(i, d);
                        }
                        deltas.push(min_sq_distance(&column, &bank.prototypes)?);
                    }
                }
                epsilon_from_deltas(&deltas)?
            }
        };
        let per_instance: Vec<Vec<f64>> = sets
            .iter()
            .map(|set| {
                instance_semantic_probabilities(
                    &set.tokens,
                    &bank.prototypes,
                    epsilon,
                    config.sign_mode,
                )
            })
            .collect::<Result<_>>()?;
        Ok((epsilon, per_instance))
    };
    let (epsilon_v, per_instance_v) = modality_probs(&proj_v, &state.bank_image)?;
    let (epsilon_t, per_instance_t) = modality_probs(&proj_t, &state.bank_text)?;

    state.probs = Some(ProbabilityState {
        sign_mode: config.sign_mode,
        epoch,
        image: ModalityProbabilities {
            pseudo_semantic: pseudo_semantic.clone(),
            pseudo_style: pseudo_style.clone(),
            epsilon: Some(epsilon_v),
            per_instance_semantic: per_instance_v,
        },
        text: ModalityProbabilities {
            pseudo_semantic,
            pseudo_style: pseudo_style.clone(),
            epsilon: Some(epsilon_t),
            per_instance_semantic: per_instance_t,
        },
    });

    // Freeze this epoch's raw centers and a fresh assignment of every
    // instance's columns for the next epoch's compactness term.
    state.compactness = Some(CompactnessSnapshot {
        assignment_image: proj_v
            .iter()
            .map(|set| column_assignment(&set.tokens, &cluster_v.centers))
            .collect(),
        assignment_text: proj_t
            .iter()
            .map(|set| column_assignment(&set.tokens, &cluster_t.centers))
            .collect(),
        centers_image: cluster_v.centers,
        centers_text: cluster_t.centers,
        style_image: pseudo_style.clone(),
        style_text: pseudo_style,
    });

    Ok((w_applied, energy))
}

/// Advance the state by one epoch and return its log record.
pub fn train_epoch(state: &mut TrainState, corpus: &Corpus) -> Result<MetricsRecord> {
    let epoch = state.epoch + 1;
    if epoch > state.config.epochs {
        return Err(Error::Config(format!(
            "training already ran its {} scheduled epochs",
            state.config.epochs
        )));
    }
    let mut order = state.train_ids.clone();
    order.shuffle(&mut state.rng);

    let mut sum_l_x = 0.0;
    let mut sum_l_c = 0.0;
    let batches = batches_of(&order, state.config.batch_size);
    let n_batches = batches.len() as f64;
    for batch in &batches {
        let eval = step(state, corpus, batch, epoch)?;
        sum_l_x += eval.l_x;
        sum_l_c += eval.l_c;
    }

    let (w_applied, energy) = epoch_end(state, corpus, epoch)?;
    let recalls = state.report(corpus, &state.val_ids)?;
    let rsum = recalls.rsum;
    let clustered = epoch >= state.config.j0
        && !matches!(state.config.ablation, Some(Ablation::Wei) | Some(Ablation::Pro));
    if clustered {
        state.bank_image.record_rsum(rsum);
        state.bank_text.record_rsum(rsum);
    }

    let record = MetricsRecord {
        epoch,
        l_x: sum_l_x / n_batches,
        l_c: sum_l_c / n_batches,
        w_applied,
        energy,
        rsum,
        recalls,
    };
    state.metrics.push(record.clone());
    state.epoch = epoch;
    Ok(record)
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// State after the last epoch.
    pub last: TrainState,
    /// State snapshot at the best validation rSum (earliest on ties).
    pub best: TrainState,
    pub best_epoch: usize,
}

/// Run the full schedule. When `out_dir` is given, the config snapshot,
/// a JSON-lines metrics log, and `last`/`best` checkpoints are written
/// there as training progresses.
pub fn fit(config: &TrainConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<FitOutcome> {
    let mut state = TrainState::new(config.clone(), corpus)?;
    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let config_path = dir.join("config.json");
            let json = serde_json::to_string_pretty(config)?;
            fs::write(&config_path, json)
                .map_err(|e| Error::io(config_path.display().to_string(), e))?;
            let path = dir.join("metrics.jsonl");
            Some(
                fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?,
            )
        }
        None => None,
    };

    let mut best: Option<(usize, f64, TrainState)> = None;
    for _ in 0..config.epochs {
        let record = train_epoch(&mut state, corpus)?;
        if let Some(file) = metrics_file.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(file, "{line}").map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        if let Some(dir) = out_dir {
            crate::checkpoint::save(&state, &dir.join("last"))?;
        }
        let improved = best.as_ref().map_or(true, |(_, rsum, _)| record.rsum > *rsum);
        if improved {
            best = Some((record.epoch, record.rsum, state.clone()));
            if let Some(dir) = out_dir {
                crate::checkpoint::save(&state, &dir.join("best"))?;
            }
        }
    }
    let (best_epoch, _, best_state) = best.expect("at least one epoch ran");
    Ok(FitOutcome { last: state, best: best_state, best_epoch })
}
