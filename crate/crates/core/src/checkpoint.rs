//! Run persistence. A checkpoint directory holds `state.json` (config,
//! schedule position, probability summaries, bank histories, rng),
//! `manifest.json` describing the tensor payloads, and one f32
//! little-endian binary file per tensor, the same scheme corpora use.
//!
//! Loading rebuilds a [`TrainState`] good for evaluation and inspection.
//! Tensors round-trip through f32, and the in-epoch compactness snapshot
//! is deliberately not persisted, so a loaded state is not a substrate
//! for bit-exact training continuation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_f32le, write_f32le, DTYPE_F32LE};
use crate::embeddings::{Modality, ProjectionHead};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::probability::{complement, ModalityProbabilities, ProbabilityState};
use crate::prototypes::PrototypeBank;
use crate::training::{MetricsRecord, TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;

/// How evaluation weights are derived from a saved state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// No probability state yet: score unweighted.
    None,
    /// One corpus-level probability vector shared by every instance.
    PseudoGlobal,
    /// Per-instance weights from prototype distances.
    Prototype,
}

#[derive(Serialize, Deserialize)]
struct BankScalars {
    m: usize,
    rsum_history: Vec<f64>,
    weight_history: Vec<f64>,
}

impl BankScalars {
    fn of(bank: &PrototypeBank) -> Self {
        BankScalars {
            m: bank.m,
            rsum_history: bank.rsum_history.clone(),
            weight_history: bank.weight_history.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: u32,
    epoch: usize,
    config: TrainConfig,
    weighting: Weighting,
    epsilon_image: Option<f64>,
    epsilon_text: Option<f64>,
    pseudo_semantic_image: Option<Vec<f64>>,
    pseudo_semantic_text: Option<Vec<f64>>,
    bank_image: BankScalars,
    bank_text: BankScalars,
    train_ids: Vec<usize>,
    val_ids: Vec<usize>,
    metrics: Vec<MetricsRecord>,
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    file: String,
    count: usize,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    tensors: BTreeMap<String, TensorEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::corrupt(path.display().to_string(), e.to_string()))
}

/// Classify the state's weighting regime for the manifest.
pub fn weighting_of(state: &TrainState) -> Weighting {
    match &state.probs {
        None => Weighting::None,
        Some(p) if p.image.epsilon.is_none() => Weighting::PseudoGlobal,
        Some(_) => Weighting::Prototype,
    }
}

/// Write the full checkpoint directory, creating it if needed.
pub fn save(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut tensors = BTreeMap::new();
    let mut put = |name: &str, mats: Vec<&Mat>, rows: usize, cols: usize| -> Result<()> {
        let file = format!("{name}.bin");
        write_f32le(dir.join(&file), &mats)?;
        tensors.insert(name.to_string(), TensorEntry { file, count: mats.len(), rows, cols });
        Ok(())
    };
    let head_v = &state.head_image.weight;
    let head_t = &state.head_text.weight;
    put("head_image", vec![head_v], head_v.rows(), head_v.cols())?;
    put("head_text", vec![head_t], head_t.rows(), head_t.cols())?;
    let bank_v = &state.bank_image;
    let bank_t = &state.bank_text;
    put("prototypes_image", vec![&bank_v.prototypes], bank_v.k(), bank_v.p())?;
    put("prototypes_text", vec![&bank_t.prototypes], bank_t.k(), bank_t.p())?;
    put(
        "pseudo_history_image",
        bank_v.pseudo_history.iter().collect(),
        bank_v.k(),
        bank_v.p(),
    )?;
    put("pseudo_history_text", bank_t.pseudo_history.iter().collect(), bank_t.k(), bank_t.p())?;

    let manifest =
        Manifest { version: CHECKPOINT_VERSION, dtype: DTYPE_F32LE.to_string(), tensors };
    write_json(&dir.join("manifest.json"), &manifest)?;

    let state_file = StateFile {
        version: CHECKPOINT_VERSION,
        epoch: state.epoch,
        config: state.config.clone(),
        weighting: weighting_of(state),
        epsilon_image: state.probs.as_ref().and_then(|p| p.image.epsilon),
        epsilon_text: state.probs.as_ref().and_then(|p| p.text.epsilon),
        pseudo_semantic_image: state.probs.as_ref().map(|p| p.image.pseudo_semantic.clone()),
        pseudo_semantic_text: state.probs.as_ref().map(|p| p.text.pseudo_semantic.clone()),
        bank_image: BankScalars::of(bank_v),
        bank_text: BankScalars::of(bank_t),
        train_ids: state.train_ids.clone(),
        val_ids: state.val_ids.clone(),
        metrics: state.metrics.clone(),
        rng: state.rng.clone(),
    };
    write_json(&dir.join("state.json"), &state_file)
}

fn tensor<'m>(manifest: &'m Manifest, dir: &Path, name: &str) -> Result<(&'m TensorEntry, Vec<Mat>)> {
    let entry = manifest.tensors.get(name).ok_or_else(|| {
        Error::corrupt(dir.join("manifest.json").display().to_string(), format!("missing tensor {name:?}"))
    })?;
    let mats = read_f32le(dir.join(&entry.file), entry.count, entry.rows, entry.cols)?;
    Ok((entry, mats))
}

fn single(mut mats: Vec<Mat>, name: &str, dir: &Path) -> Result<Mat> {
    if mats.len() != 1 {
        return Err(Error::corrupt(
            dir.display().to_string(),
            format!("tensor {name:?} should hold exactly one matrix, found {}", mats.len()),
        ));
    }
    Ok(mats.pop().expect("checked length"))
}

fn rebuild_bank(
    modality: Modality,
    prototypes: Mat,
    pseudo_history: Vec<Mat>,
    scalars: &BankScalars,
    config: &TrainConfig,
    dir: &Path,
) -> Result<PrototypeBank> {
    if prototypes.rows() != config.k {
        return Err(Error::corrupt(
            dir.display().to_string(),
            format!("prototypes hold {} clusters, config says {}", prototypes.rows(), config.k),
        ));
    }
    if pseudo_history.len() != scalars.m || scalars.weight_history.len() != scalars.m {
        return Err(Error::corrupt(
            dir.display().to_string(),
            format!(
                "bank claims {} blends but has {} pseudo prototypes and {} weights",
                scalars.m,
                pseudo_history.len(),
                scalars.weight_history.len()
            ),
        ));
    }
    Ok(PrototypeBank {
        modality,
        prototypes,
        m: scalars.m,
        rsum_history: scalars.rsum_history.clone(),
        weight_history: scalars.weight_history.clone(),
        pseudo_history,
        j0: config.j0,
        j_total: config.epochs,
    })
}

/// Load a checkpoint directory back into a state for evaluation and
/// inspection. Per-instance probability tables are not stored; they are
/// recomputed from prototypes and the stored epsilon on demand.
pub fn load(dir: &Path) -> Result<TrainState> {
    let state_file: StateFile = read_json(&dir.join("state.json"))?;
    if state_file.version != CHECKPOINT_VERSION {
        return Err(Error::corrupt(
            dir.join("state.json").display().to_string(),
            format!("unsupported version {}", state_file.version),
        ));
    }
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.version != CHECKPOINT_VERSION || manifest.dtype != DTYPE_F32LE {
        return Err(Error::corrupt(
            dir.join("manifest.json").display().to_string(),
            format!("unsupported version {} / dtype {:?}", manifest.version, manifest.dtype),
        ));
    }
    state_file.config.validate()?;

    let head_image = single(tensor(&manifest, dir, "head_image")?.1, "head_image", dir)?;
    let head_text = single(tensor(&manifest, dir, "head_text")?.1, "head_text", dir)?;
    if head_image.cols() != state_file.config.d || head_text.cols() != state_file.config.d {
        return Err(Error::corrupt(
            dir.display().to_string(),
            format!(
                "heads project to {}x{} columns, config says {}",
                head_image.cols(),
                head_text.cols(),
                state_file.config.d
            ),
        ));
    }
    let prototypes_image =
        single(tensor(&manifest, dir, "prototypes_image")?.1, "prototypes_image", dir)?;
    let prototypes_text =
        single(tensor(&manifest, dir, "prototypes_text")?.1, "prototypes_text", dir)?;
    let pseudo_image = tensor(&manifest, dir, "pseudo_history_image")?.1;
    let pseudo_text = tensor(&manifest, dir, "pseudo_history_text")?.1;

    let bank_image = rebuild_bank(
        Modality::Image,
        prototypes_image,
        pseudo_image,
        &state_file.bank_image,
        &state_file.config,
        dir,
    )?;
    let bank_text = rebuild_bank(
        Modality::Text,
        prototypes_text,
        pseudo_text,
        &state_file.bank_text,
        &state_file.config,
        dir,
    )?;

    let n = state_file.train_ids.len() + state_file.val_ids.len();
    let rebuild_modality = |pseudo: &Option<Vec<f64>>,
                            epsilon: Option<f64>|
     -> Result<ModalityProbabilities> {
        let pseudo = pseudo.as_ref().ok_or_else(|| {
            Error::corrupt(dir.display().to_string(), "weighted state without pseudo probabilities")
        })?;
        let per_instance_semantic = match epsilon {
            // Broadcast regime: the stored vector is every instance's weight.
            None => vec![pseudo.clone(); n],
            // Prototype regime: recomputed against a corpus when needed.
            Some(_) => Vec::new(),
        };
        Ok(ModalityProbabilities {
            pseudo_semantic: pseudo.clone(),
            pseudo_style: complement(pseudo)?,
            epsilon,
            per_instance_semantic,
        })
    };
    let probs = match state_file.weighting {
        Weighting::None => None,
        Weighting::PseudoGlobal | Weighting::Prototype => Some(ProbabilityState {
            sign_mode: state_file.config.sign_mode,
            epoch: state_file.epoch,
            image: rebuild_modality(&state_file.pseudo_semantic_image, state_file.epsilon_image)?,
            text: rebuild_modality(&state_file.pseudo_semantic_text, state_file.epsilon_text)?,
        }),
    };

    Ok(TrainState {
        head_image: ProjectionHead::new(Modality::Image, head_image),
        head_text: ProjectionHead::new(Modality::Text, head_text),
        bank_image,
        bank_text,
        probs,
        compactness: None,
        epoch: state_file.epoch,
        metrics: state_file.metrics,
        train_ids: state_file.train_ids,
        val_ids: state_file.val_ids,
        rng: state_file.rng,
        config: state_file.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, SynthConfig};
    use crate::training::{fit, TrainConfig};

    fn trained_state() -> (TrainState, crate::corpus::Corpus) {
        let synth = SynthConfig {
            pair_count: 8,
            d_raw: 8,
            d: 4,
            n_v: 2,
            n_t: 2,
            semantic_column_count: 4,
            style_cluster_count: 2,
            style_amplitude: 1.0,
            noise_sigma: 0.05,
            seed: 3,
        };
        let (corpus, _) = generate_corpus(&synth).unwrap();
        let config = TrainConfig {
            epochs: 3,
            j0: 1,
            batch_size: 4,
            d: 4,
            k: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        (fit(&config, &corpus, None).unwrap().last, corpus)
    }

    fn f32_round(mat: &Mat) -> Mat {
        Mat::from_f32(mat.rows(), mat.cols(), &mat.to_f32()).unwrap()
    }

    #[test]
    fn round_trip_preserves_state_through_f32_tensors() {
        let (state, corpus) = trained_state();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();

        assert_eq!(loaded.epoch, state.epoch);
        assert_eq!(loaded.config, state.config);
        assert_eq!(loaded.train_ids, state.train_ids);
        assert_eq!(loaded.val_ids, state.val_ids);
        assert_eq!(loaded.metrics, state.metrics);
        assert_eq!(loaded.rng, state.rng);
        // Tensors come back rounded to f32, nothing more.
        assert_eq!(loaded.head_image.weight, f32_round(&state.head_image.weight));
        assert_eq!(loaded.bank_image.prototypes, f32_round(&state.bank_image.prototypes));
        assert_eq!(loaded.bank_image.pseudo_history.len(), state.bank_image.m);
        // Scalar histories are exact.
        assert_eq!(loaded.bank_image.rsum_history, state.bank_image.rsum_history);
        assert_eq!(loaded.bank_text.weight_history, state.bank_text.weight_history);
        let lp = loaded.probs.as_ref().unwrap();
        let sp = state.probs.as_ref().unwrap();
        assert_eq!(lp.image.pseudo_semantic, sp.image.pseudo_semantic);
        assert_eq!(lp.image.epsilon, sp.image.epsilon);
        // A loaded state evaluates like the live one up to f32 rounding.
        let ids: Vec<usize> = (0..corpus.pair_count()).collect();
        let live = state.report(&corpus, &ids).unwrap();
        let replayed = loaded.report(&corpus, &ids).unwrap();
        assert_eq!(live.pair_count, replayed.pair_count);
    }

    #[test]
    fn manifest_count_mismatch_is_rejected() {
        let (state, _) = trained_state();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        std::fs::write(&manifest_path, text.replace("\"count\": 1", "\"count\": 2")).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let (state, _) = trained_state();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let payload = dir.path().join("head_image.bin");
        let bytes = std::fs::read(&payload).unwrap();
        std::fs::write(&payload, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn missing_state_file_is_rejected() {
        let (state, _) = trained_state();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("state.json")).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn version_bump_is_rejected() {
        let (state, _) = trained_state();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let path = dir.path().join("state.json");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"version\": 1", "\"version\": 9")).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn unweighted_state_loads_without_probabilities() {
        let (mut state, corpus) = trained_state();
        state.probs = None;
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert!(loaded.probs.is_none());
        let ids: Vec<usize> = (0..corpus.pair_count()).collect();
        loaded.report(&corpus, &ids).unwrap();
    }
}
