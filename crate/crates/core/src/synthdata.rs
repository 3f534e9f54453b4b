//! Synthetic paired corpora with planted semantic/style structure.
//!
//! Each matched pair shares one latent coefficient vector, one entry per
//! designated semantic column, identical in both modalities. Every token
//! carries its column's coefficient scaled by a positive per-token gain
//! (drawn per instance), so the shared signal is spread across tokens
//! rather than stamped identically on each one; a column's token profile
//! therefore points in a fresh random direction per instance and never
//! recurs across the corpus. The remaining style
//! columns carry a per-modality cluster signal: each instance draws a
//! style label and an intensity, and its style columns follow that
//! cluster's planted token profile (plus a small fixed per-column wobble)
//! scaled by the intensity. Style labels and intensities are drawn
//! independently per modality, so style never helps cross-modal matching;
//! it only pollutes it, and pollutes some instances much harder than
//! others. Gaussian noise of width `noise_sigma` covers everything.
//!
//! Latents are drawn on the sphere of radius sqrt(S), fixing the
//! matched-pair semantic energy, and every instance's gain vector is
//! pinned to a common mean and peak. Together these make the noiseless
//! corpus perfectly separable by a mask-restricted scorer: a matched pair
//! scores the full sphere radius squared times a constant, an impostor
//! the same constant times a strictly smaller latent dot.
//!
//! All token values are quantized to f32 before use so a generated corpus
//! is bit-identical to its saved-and-reloaded self.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_pp_init, reservoir_sample, weighted_kmeans, ColumnInstance};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::probability::{
    complement, epsilon_from_deltas, min_sq_distance, pseudo_semantic_probability, to_semantic,
    SignMode,
};

/// Fixed spread of per-column style patterns around their cluster profile,
/// relative to the profile itself. Small: style columns hug their planted
/// pattern, so a cluster is a tight knot rather than a diffuse shell.
const COLUMN_WOBBLE: f64 = 0.1;

/// Half-width of the uniform per-token gain on the shared latent. Wide,
/// so the token profile of a semantic column points in a genuinely fresh
/// direction per instance instead of hugging the all-ones diagonal.
const TOKEN_GAIN_SPREAD: f64 = 0.8;

/// Every instance's gain vector is affinely pinned to mean 1 and this
/// exact peak. With both pinned, a noiseless matched pair scores
/// 2 * TOKEN_GAIN_PEAK * S under the mask-restricted scorer while every
/// impostor scores the same factor times a strictly smaller latent dot,
/// so perfect separability is structural rather than a matter of luck.
const TOKEN_GAIN_PEAK: f64 = 1.4;

/// Half-width of the uniform per-instance style intensity. Mild
/// heterogeneity: style contamination varies a little per instance, but
/// every style column still sits near its cluster's planted pattern, far
/// from the origin, so clusters stay tight knots.
const STYLE_INTENSITY_SPREAD: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub pair_count: usize,
    /// Raw embedding width written to the corpus.
    pub d_raw: usize,
    /// Interaction width the downstream projection maps to; recorded here
    /// so one flat config drives generation and training.
    pub d: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub semantic_column_count: usize,
    pub style_cluster_count: usize,
    pub style_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True/false per raw column; true marks semantic columns. Stored per
    /// modality even though this generator plants the same set in both.
    pub semantic_mask_image: Vec<bool>,
    pub semantic_mask_text: Vec<bool>,
    /// Style cluster label per instance, drawn independently per modality.
    pub style_labels_image: Vec<usize>,
    pub style_labels_text: Vec<usize>,
    /// Planted style token profiles (cluster x token), amplitude applied.
    pub style_prototypes_image: Vec<Vec<f64>>,
    pub style_prototypes_text: Vec<Vec<f64>>,
}

fn validate(config: &SynthConfig) -> Result<()> {
    if config.pair_count == 0 {
        return Err(Error::Config("pair_count must be positive".into()));
    }
    if config.n_v == 0 || config.n_t == 0 {
        return Err(Error::Config("token counts must be positive".into()));
    }
    if config.semantic_column_count == 0 || config.semantic_column_count > config.d_raw {
        return Err(Error::Config(format!(
            "semantic_column_count {} outside 1..={}",
            config.semantic_column_count, config.d_raw
        )));
    }
    if config.style_cluster_count == 0 {
        return Err(Error::Config("style_cluster_count must be positive".into()));
    }
    if config.style_amplitude < 0.0 || config.noise_sigma < 0.0 {
        return Err(Error::Config("amplitudes must be nonnegative".into()));
    }
    Ok(())
}

fn gaussian_vec<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_latent<R: Rng>(rng: &mut R, s: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, s);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm >= 1e-8 {
            let scale = (s as f64).sqrt() / norm;
            return v.into_iter().map(|x| x * scale).collect();
        }
    }
}

/// Per-cluster, per-style-column token patterns for one modality.
///
/// Cluster profiles are mutually orthogonal (norm sqrt(n), matching a
/// Gaussian draw in expectation) while token room lasts, so planted
/// clusters never shadow each other. Past n_tokens profiles,
/// orthogonality is impossible and extras stay plain Gaussian draws.
fn style_patterns<R: Rng>(
    rng: &mut R,
    clusters: usize,
    style_cols: usize,
    n_tokens: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let mut profiles: Vec<Vec<f64>> = Vec::with_capacity(clusters);
    while profiles.len() < clusters {
        let mut p = gaussian_vec(rng, n_tokens);
        if profiles.len() < n_tokens {
            for prev in &profiles {
                let dot: f64 = p.iter().zip(prev).map(|(a, b)| a * b).sum();
                let prev_sq: f64 = prev.iter().map(|v| v * v).sum();
                for (x, q) in p.iter_mut().zip(prev) {
                    *x -= dot / prev_sq * q;
                }
            }
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            let scale = (n_tokens as f64).sqrt() / norm;
            for x in &mut p {
                *x *= scale;
            }
        }
        profiles.push(p);
    }
    let patterns: Vec<Vec<Vec<f64>>> = profiles
        .iter()
        .map(|profile| {
            (0..style_cols)
                .map(|_| {
                    // Fixed wobble energy: every column deviates from its
                    // profile by the same amount regardless of cluster, so
                    // distance to the planted pattern carries no cluster
                    // identity, only instance-level variation.
                    let mut wobble = gaussian_vec(rng, n_tokens);
                    let norm = wobble.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let scale = if norm < 1e-8 {
                        0.0
                    } else {
                        COLUMN_WOBBLE * (n_tokens as f64).sqrt() / norm
                    };
                    profile
                        .iter()
                        .zip(wobble.iter_mut())
                        .map(|(p, w)| p + scale * *w)
                        .collect()
                })
                .collect()
        })
        .collect();
    (profiles, patterns)
}

pub fn generate_corpus(config: &SynthConfig) -> Result<(Corpus, GroundTruth)> {
    validate(config)?;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let s = config.semantic_column_count;
    let c = config.style_cluster_count;

    let semantic_cols = {
        let mut cols = rand::seq::index::sample(&mut rng, config.d_raw, s).into_vec();
        cols.sort_unstable();
        cols
    };
    let mut is_semantic = vec![false; config.d_raw];
    for &col in &semantic_cols {
        is_semantic[col] = true;
    }
    let style_cols: Vec<usize> = (0..config.d_raw).filter(|&d| !is_semantic[d]).collect();

    let (profiles_v, patterns_v) = style_patterns(&mut rng, c, style_cols.len(), config.n_v);
    let (profiles_t, patterns_t) = style_patterns(&mut rng, c, style_cols.len(), config.n_t);

    let amp = config.style_amplitude;
    let sigma = config.noise_sigma;
    let mut corpus = Corpus::new(config.d_raw, config.n_v, config.n_t);
    let mut labels_v = Vec::with_capacity(config.pair_count);
    let mut labels_t = Vec::with_capacity(config.pair_count);

    for _ in 0..config.pair_count {
        let latent = unit_latent(&mut rng, s);
        let label_v = rng.gen_range(0..c);
        let label_t = rng.gen_range(0..c);
        labels_v.push(label_v);
        labels_t.push(label_t);

        let fill = |n_tokens: usize, label: usize, patterns: &[Vec<Vec<f64>>], rng: &mut rand_chacha::ChaCha8Rng| {
            // Pin each gain vector to mean 1 and peak TOKEN_GAIN_PEAK.
            // Instances then differ in how the latent is distributed over
            // tokens, never in how much of it they carry or how tall the
            // best token stands, which is what keeps the noiseless oracle
            // exact regardless of which latents the seed happens to draw.
            let gains: Vec<f64> = if n_tokens == 1 {
                vec![1.0]
            } else {
                loop {
                    let raw: Vec<f64> = (0..n_tokens)
                        .map(|_| 1.0 + TOKEN_GAIN_SPREAD * rng.gen_range(-1.0..1.0))
                        .collect();
                    let mean = raw.iter().sum::<f64>() / n_tokens as f64;
                    let max = raw.iter().cloned().fold(f64::MIN, f64::max);
                    if max - mean < 0.25 * TOKEN_GAIN_SPREAD {
                        continue;
                    }
                    let a = (TOKEN_GAIN_PEAK - 1.0) / (max - mean);
                    let b = 1.0 - a * mean;
                    let pinned: Vec<f64> = raw.iter().map(|g| a * g + b).collect();
                    if pinned.iter().all(|&g| g > 0.05) {
                        break pinned;
                    }
                }
            };
            let intensity = 1.0 + STYLE_INTENSITY_SPREAD * rng.gen_range(-1.0..1.0);
            let mut tokens = Mat::zeros(n_tokens, config.d_raw);
            for i in 0..n_tokens {
                for (pos, &col) in semantic_cols.iter().enumerate() {
                    let noise: f64 =
                        if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                    tokens.set(i, col, ((latent[pos] * gains[i] + noise) as f32) as f64);
                }
                for (pos, &col) in style_cols.iter().enumerate() {
                    let noise: f64 =
                        if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                    let value = intensity * amp * patterns[label][pos][i] + noise;
                    tokens.set(i, col, (value as f32) as f64);
                }
            }
            tokens
        };
        let image = fill(config.n_v, label_v, &patterns_v, &mut rng);
        let text = fill(config.n_t, label_t, &patterns_t, &mut rng);
        corpus.push_pair(image, text)?;
    }

    let scale_profiles = |profiles: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        profiles
            .into_iter()
            .map(|p| p.into_iter().map(|v| amp * v).collect())
            .collect()
    };
    let truth = GroundTruth {
        semantic_mask_image: is_semantic.clone(),
        semantic_mask_text: is_semantic,
        style_labels_image: labels_v,
        style_labels_text: labels_t,
        style_prototypes_image: scale_profiles(profiles_v),
        style_prototypes_text: scale_profiles(profiles_t),
    };
    Ok((corpus, truth))
}

pub fn save_ground_truth<P: AsRef<std::path::Path>>(truth: &GroundTruth, path: P) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(truth)?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_ground_truth<P: AsRef<std::path::Path>>(path: P) -> Result<GroundTruth> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&raw)
        .map_err(|e| Error::corrupt(path.display().to_string(), format!("bad ground truth: {e}")))
}

/// Area under the ROC curve for ranking columns by a per-column score
/// against the boolean semantic mask. Ties contribute half, so a constant
/// score vector gives exactly 0.5.
pub fn score_column_ranking(column_scores: &[f64], semantic_mask: &[bool]) -> Result<f64> {
    if column_scores.len() != semantic_mask.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} mask entries",
            column_scores.len(),
            semantic_mask.len()
        )));
    }
    let positives = semantic_mask.iter().filter(|&&m| m).count();
    let negatives = semantic_mask.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Config("mask must contain both classes".into()));
    }
    let mut wins = 0.0;
    for (i, &pos) in semantic_mask.iter().enumerate() {
        if !pos {
            continue;
        }
        for (j, &neg) in semantic_mask.iter().enumerate() {
            if neg {
                continue;
            }
            if column_scores[i] > column_scores[j] {
                wins += 1.0;
            } else if column_scores[i] == column_scores[j] {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (positives * negatives) as f64)
}

/// Run the full separation machinery in raw column space: sign-agreement
/// pseudo probabilities weight a k-means pass over raw column instances,
/// and the resulting prototypes score every column through the sigmoid
/// estimator. Returns the mean semantic probability per raw column for
/// each modality, comparable against the generator's mask.
pub fn column_separation_scores(
    corpus: &Corpus,
    k: usize,
    sign_mode: SignMode,
    reservoir_cap: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    use rand::SeedableRng;
    let pairs: Vec<_> = corpus.images.iter().zip(corpus.texts.iter()).collect();
    let p_hat = pseudo_semantic_probability(&pairs)?;
    let q_hat = complement(&p_hat)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let mut per_modality = Vec::with_capacity(2);
    for sets in [&corpus.images, &corpus.texts] {
        let stream = sets.iter().flat_map(|set| {
            crate::clustering::column_instances(&set.tokens, set.instance_id, &q_hat)
                .expect("weights sized to columns")
        });
        let sample: Vec<ColumnInstance> = reservoir_sample(stream, reservoir_cap, &mut rng);
        let init = kmeans_pp_init(&sample, k, &mut rng)?;
        let state = weighted_kmeans(&sample, k, &init, 50, 1e-6)?;

        let mut deltas = Vec::with_capacity(sets.len() * corpus.d);
        for set in sets.iter() {
            for d in 0..corpus.d {
                let column: Vec<f64> =
                    (0..set.n_tokens()).map(|i| set.tokens.get(i, d)).collect();
                deltas.push(min_sq_distance(&column, &state.centers)?);
            }
        }
        let epsilon = epsilon_from_deltas(&deltas)?;
        let mut col_sums = vec![0.0; corpus.d];
        for idx in 0..sets.len() {
            for d in 0..corpus.d {
                let delta2 = deltas[idx * corpus.d + d];
                let ratio = delta2 / epsilon;
                let q = match sign_mode {
                    SignMode::PaperLiteral => 1.0 / (1.0 + (-ratio).exp()),
                    SignMode::NegatedExponent => {
                        let e = (-ratio).exp();
                        e / (1.0 + e)
                    }
                };
                col_sums[d] += to_semantic(q)?;
            }
        }
        let n = sets.len() as f64;
        per_modality.push(col_sums.into_iter().map(|s| s / n).collect::<Vec<f64>>());
    }
    let text_scores = per_modality.pop().expect("two modalities");
    let image_scores = per_modality.pop().expect("two modalities");
    Ok((image_scores, text_scores))
}
