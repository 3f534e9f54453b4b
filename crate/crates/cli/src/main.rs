//! Command-line surface: generate corpora, train, evaluate, inspect
//! checkpoints, and export score distributions.
//!
//! All settings live in one flat JSON config file with documented
//! defaults; the handful of flags below override file values. Parse
//! errors exit 2 (clap's convention), runtime failures print a one-line
//! diagnostic and exit 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crossalign::checkpoint;
use crossalign::corpus::{load_corpus, save_corpus, Corpus};
use crossalign::evaluation::{export_score_distribution, ScoringView};
use crossalign::mat::Mat;
use crossalign::probability::SignMode;
use crossalign::synthdata::{generate_corpus, save_ground_truth, SynthConfig};
use crossalign::training::{
    corpus_weights, fit, project_instance, Ablation, EpsilonMode, NegStrategy, TrainConfig,
    TrainState,
};

const CONFIG_KEYS: &str = "\
Config file keys (flat JSON, unknown keys rejected):
  pair_count (2000)            corpus pairs to generate
  d_raw (64)                   raw token dimension
  d (32)                       projected dimension
  n_v (8), n_t (8)             image / text tokens per instance
  semantic_column_count (16)   planted cross-modal columns
  style_cluster_count (4)      planted style clusters per modality
  style_amplitude (2.0)        style offset scale
  noise_sigma (0.1)            additive noise scale
  seed (7)                     rng seed shared by gen and train
  alpha (0.2)                  triplet margin
  omega_c (5.0)                compactness loss weight
  j0 (3)                       first epoch with prototype state
  epochs (12)                  total epochs J
  batch_size (64)
  learning_rate (0.0002)
  neg_strategy (\"distance_weighted\" | \"hardest_in_batch\")
  neg_clamp (50.0)             sampling weight cap
  k (8)                        style clusters learned per modality
  epsilon_mode (\"median\" or a positive number)
  sign_mode (\"negated_exponent\" | \"paper_literal\")
  normalize_tokens (true)
  reservoir_cap (50000)        column instances per clustering pass
  kmeans_max_iter (50), kmeans_tol (1e-6)
  ablation (null | \"wei\" | \"pro\" | \"ite\" | \"fed\")
  corpus, checkpoint, report, out   default paths, overridden by flags";

/// Flat union of every generation and training setting plus default
/// paths. Matches CONFIG_KEYS above.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    pair_count: usize,
    d_raw: usize,
    d: usize,
    n_v: usize,
    n_t: usize,
    semantic_column_count: usize,
    style_cluster_count: usize,
    style_amplitude: f64,
    noise_sigma: f64,
    seed: u64,
    alpha: f64,
    omega_c: f64,
    j0: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    neg_strategy: NegStrategy,
    neg_clamp: f64,
    k: usize,
    epsilon_mode: EpsilonMode,
    sign_mode: SignMode,
    normalize_tokens: bool,
    reservoir_cap: usize,
    kmeans_max_iter: usize,
    kmeans_tol: f64,
    ablation: Option<Ablation>,
    corpus: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    report: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Default for FileConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        FileConfig {
            pair_count: 2000,
            d_raw: 64,
            d: train.d,
            n_v: 8,
            n_t: 8,
            semantic_column_count: 16,
            style_cluster_count: 4,
            style_amplitude: 2.0,
            noise_sigma: 0.1,
            seed: train.seed,
            alpha: train.alpha,
            omega_c: train.omega_c,
            j0: train.j0,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            neg_strategy: train.neg_strategy,
            neg_clamp: train.neg_clamp,
            k: train.k,
            epsilon_mode: train.epsilon_mode,
            sign_mode: train.sign_mode,
            normalize_tokens: train.normalize_tokens,
            reservoir_cap: train.reservoir_cap,
            kmeans_max_iter: train.kmeans_max_iter,
            kmeans_tol: train.kmeans_tol,
            ablation: None,
            corpus: None,
            checkpoint: None,
            report: None,
            out: None,
        }
    }
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))
            }
        }
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            pair_count: self.pair_count,
            d_raw: self.d_raw,
            d: self.d,
            n_v: self.n_v,
            n_t: self.n_t,
            semantic_column_count: self.semantic_column_count,
            style_cluster_count: self.style_cluster_count,
            style_amplitude: self.style_amplitude,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            omega_c: self.omega_c,
            j0: self.j0,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            d: self.d,
            neg_strategy: self.neg_strategy,
            neg_clamp: self.neg_clamp,
            seed: self.seed,
            k: self.k,
            epsilon_mode: self.epsilon_mode,
            sign_mode: self.sign_mode,
            normalize_tokens: self.normalize_tokens,
            reservoir_cap: self.reservoir_cap,
            kmeans_max_iter: self.kmeans_max_iter,
            kmeans_tol: self.kmeans_tol,
            ablation: self.ablation,
        }
    }
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: crossalign::Error| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "crossalign",
    version,
    about = "Cross-modal retrieval with learned per-dimension weights, desk scale"
)]
struct Cli {
    /// Worker threads for parallel scoring (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted ground truth.
    #[command(after_help = CONFIG_KEYS)]
    Gen {
        /// Flat JSON config file; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the corpus and its ground truth.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a generated corpus and write a run directory.
    #[command(after_help = CONFIG_KEYS)]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory written by gen.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Run directory: config snapshot, metrics log, checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Disable one mechanism: wei, pro, ite or fed.
        #[arg(long, value_parser = parse_ablation)]
        ablate: Option<Ablation>,
    },
    /// Evaluate a checkpoint on a corpus and write the retrieval report.
    #[command(after_help = CONFIG_KEYS)]
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory, or a run directory holding best/ or last/.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Where to write the report JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print a checkpoint's prototypes, probabilities and histories as JSON.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export matched vs mismatched score distributions as CSV.
    #[command(name = "export-dist", after_help = CONFIG_KEYS)]
    ExportDist {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Where to write the CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global()
        {
            eprintln!("error: setting worker count: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn require(path: Option<PathBuf>, fallback: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.or(fallback)
        .ok_or_else(|| anyhow!("missing {what}: pass the flag or set it in the config file"))
}

/// Accept either a concrete checkpoint directory or a run directory
/// holding best/ and last/.
fn resolve_checkpoint(dir: &Path) -> Result<PathBuf> {
    if dir.join("state.json").is_file() {
        return Ok(dir.to_path_buf());
    }
    for sub in ["best", "last"] {
        let candidate = dir.join(sub);
        if candidate.join("state.json").is_file() {
            return Ok(candidate);
        }
    }
    bail!("no checkpoint under {} (expected state.json, best/ or last/)", dir.display())
}

fn load_state(dir: &Path) -> Result<TrainState> {
    let resolved = resolve_checkpoint(dir)?;
    checkpoint::load(&resolved)
        .with_context(|| format!("loading checkpoint {}", resolved.display()))
}

fn mat_rows(mat: &Mat) -> Vec<Vec<f64>> {
    (0..mat.rows()).map(|i| mat.row(i).to_vec()).collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out, seed } => {
            let mut file = FileConfig::load(config.as_deref())?;
            if let Some(seed) = seed {
                file.seed = seed;
            }
            let out = require(out, file.out.clone(), "--out")?;
            let (corpus, truth) = generate_corpus(&file.synth_config())?;
            fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            save_corpus(&corpus, &out)?;
            save_ground_truth(&truth, out.join("ground_truth.json"))?;
            println!(
                "wrote {} pairs ({}x{} image, {}x{} text tokens) to {}",
                corpus.pair_count(),
                corpus.n_v,
                corpus.d,
                corpus.n_t,
                corpus.d,
                out.display()
            );
            Ok(())
        }
        Command::Train { config, corpus, out, seed, epochs, ablate } => {
            let mut file = FileConfig::load(config.as_deref())?;
            if let Some(seed) = seed {
                file.seed = seed;
            }
            if let Some(epochs) = epochs {
                file.epochs = epochs;
            }
            if let Some(ablate) = ablate {
                file.ablation = Some(ablate);
            }
            let corpus_dir = require(corpus, file.corpus.clone(), "--corpus")?;
            let out = require(out, file.out.clone(), "--out")?;
            let corpus = load_corpus(&corpus_dir)?;
            let train_config = file.train_config();
            let outcome = fit(&train_config, &corpus, Some(&out))?;
            for record in &outcome.last.metrics {
                println!(
                    "epoch {:>3}/{}  l_x {:.4}  l_c {:.4}  val rsum {:.1}",
                    record.epoch, train_config.epochs, record.l_x, record.l_c, record.rsum
                );
            }
            println!(
                "best epoch {} (val rsum {:.1}); run written to {}",
                outcome.best_epoch,
                outcome.best.metrics.last().map_or(0.0, |m| m.rsum),
                out.display()
            );
            Ok(())
        }
        Command::Eval { config, checkpoint, corpus, report } => {
            let file = FileConfig::load(config.as_deref())?;
            let checkpoint = require(checkpoint, file.checkpoint.clone(), "--checkpoint")?;
            let corpus_dir = require(corpus, file.corpus.clone(), "--corpus")?;
            let report_path = require(report, file.report.clone(), "--report")?;
            let state = load_state(&checkpoint)?;
            let corpus = load_corpus(&corpus_dir)?;
            let ids: Vec<usize> = (0..corpus.pair_count()).collect();
            let report = state.report(&corpus, &ids)?;
            let json = serde_json::to_string_pretty(&report)?;
            fs::write(&report_path, json)
                .with_context(|| format!("writing {}", report_path.display()))?;
            println!(
                "rsum {:.1} over {} pairs; report written to {}",
                report.rsum,
                report.pair_count,
                report_path.display()
            );
            Ok(())
        }
        Command::Inspect { config, checkpoint } => {
            let file = FileConfig::load(config.as_deref())?;
            let checkpoint = require(checkpoint, file.checkpoint.clone(), "--checkpoint")?;
            let state = load_state(&checkpoint)?;
            let bank = |bank: &crossalign::prototypes::PrototypeBank| {
                serde_json::json!({
                    "m": bank.m,
                    "rsum_history": bank.rsum_history,
                    "weight_history": bank.weight_history,
                    "prototypes": mat_rows(&bank.prototypes),
                })
            };
            let probabilities = state.probs.as_ref().map(|p| {
                serde_json::json!({
                    "epoch": p.epoch,
                    "sign_mode": p.sign_mode,
                    "image": {
                        "pseudo_semantic": p.image.pseudo_semantic,
                        "epsilon": p.image.epsilon,
                    },
                    "text": {
                        "pseudo_semantic": p.text.pseudo_semantic,
                        "epsilon": p.text.epsilon,
                    },
                })
            });
            let summary = serde_json::json!({
                "epoch": state.epoch,
                "weighting": checkpoint::weighting_of(&state),
                "config": state.config,
                "banks": { "image": bank(&state.bank_image), "text": bank(&state.bank_text) },
                "probabilities": probabilities,
                "metrics": state.metrics,
            });
            // Inspect output is made for piping; a closed pipe is not an
            // error.
            use std::io::Write as _;
            let text = serde_json::to_string_pretty(&summary)?;
            match writeln!(std::io::stdout(), "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                other => other.context("writing to stdout"),
            }
        }
        Command::ExportDist { config, checkpoint, corpus, out, seed } => {
            let mut file = FileConfig::load(config.as_deref())?;
            if let Some(seed) = seed {
                file.seed = seed;
            }
            let checkpoint = require(checkpoint, file.checkpoint.clone(), "--checkpoint")?;
            let corpus_dir = require(corpus, file.corpus.clone(), "--corpus")?;
            let out = require(out, file.out.clone(), "--out")?;
            let state = load_state(&checkpoint)?;
            let corpus = load_corpus(&corpus_dir)?;
            write_distribution(&state, &corpus, &out, file.seed)?;
            println!("score distribution written to {}", out.display());
            Ok(())
        }
    }
}

fn write_distribution(state: &TrainState, corpus: &Corpus, out: &Path, seed: u64) -> Result<()> {
    let normalize = state.config.normalize_tokens;
    let images: Vec<Mat> = corpus
        .images
        .iter()
        .map(|set| Ok(project_instance(set, &state.head_image, normalize)?.tokens))
        .collect::<crossalign::Result<_>>()?;
    let texts: Vec<Mat> = corpus
        .texts
        .iter()
        .map(|set| Ok(project_instance(set, &state.head_text, normalize)?.tokens))
        .collect::<crossalign::Result<_>>()?;
    let weights = corpus_weights(state, corpus)?;
    let view = ScoringView {
        images: &images,
        texts: &texts,
        weights_v: weights.as_ref().map(|(v, _)| v.as_slice()),
        weights_t: weights.as_ref().map(|(_, t)| t.as_slice()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    export_score_distribution(&view, out, &mut rng)?;
    Ok(())
}
