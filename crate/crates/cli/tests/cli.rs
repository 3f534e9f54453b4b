//! End-to-end tests against the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crossalign::checkpoint;
use crossalign::embeddings::{Modality, ProjectionHead};
use crossalign::mat::Mat;
use crossalign::probability::{ModalityProbabilities, ProbabilityState};
use crossalign::synthdata::load_ground_truth;
use crossalign::training::{TrainConfig, TrainState};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crossalign"))
}

fn run_ok(args: &[&str]) -> Output {
    let output = bin().args(args).output().expect("spawn");
    assert!(
        output.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{"pair_count": 24, "d_raw": 8, "d": 4, "n_v": 2, "n_t": 2,
            "semantic_column_count": 4, "style_cluster_count": 2,
            "epochs": 3, "j0": 1, "batch_size": 8, "k": 2, "seed": 5}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_train_eval_pipeline_produces_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    let report = dir.path().join("report.json");

    run_ok(&["gen", "--config", &config, "--out", corpus.to_str().unwrap()]);
    assert!(corpus.join("manifest.json").is_file());
    assert!(corpus.join("ground_truth.json").is_file());

    run_ok(&[
        "train",
        "--config",
        &config,
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(run.join("metrics.jsonl").is_file());
    assert!(run.join("best/state.json").is_file());

    run_ok(&[
        "eval",
        "--checkpoint",
        run.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let sum: f64 = ["r1_i2t", "r5_i2t", "r10_i2t", "r1_t2i", "r5_t2i", "r10_t2i"]
        .iter()
        .map(|k| parsed[k].as_f64().unwrap())
        .sum();
    assert_eq!(parsed["rsum"].as_f64().unwrap(), sum);
    assert_eq!(parsed["pair_count"].as_u64().unwrap(), 24);
}

#[test]
fn unknown_flag_exits_2() {
    let output = bin().args(["train", "--bogus-flag"]).output().expect("spawn");
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"pair_count": 8, "learning_rte": 0.1}"#).unwrap();
    let output = bin()
        .args(["gen", "--config", config.to_str().unwrap(), "--out", "/tmp/never-used"])
        .output()
        .expect("spawn");
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("learning_rte"), "diagnostic should name the key: {stderr}");
    assert_eq!(stderr.lines().count(), 1, "diagnostic should be one line: {stderr}");
}

#[test]
fn help_lists_the_config_keys() {
    let output = run_ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&output.stdout);
    for key in ["learning_rate", "omega_c", "epsilon_mode", "reservoir_cap", "neg_strategy"] {
        assert!(text.contains(key), "--help must document {key}");
    }
}

/// A noiseless corpus scored with identity heads and the planted semantic
/// mask as every instance's weights ranks every true pair first.
#[test]
fn mask_restricted_eval_on_a_noiseless_corpus_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"pair_count": 20, "d_raw": 8, "d": 8, "n_v": 2, "n_t": 2,
            "semantic_column_count": 4, "style_cluster_count": 2,
            "noise_sigma": 0.0, "seed": 9}"#,
    )
    .unwrap();
    let corpus = dir.path().join("corpus");
    run_ok(&["gen", "--config", config.to_str().unwrap(), "--out", corpus.to_str().unwrap()]);

    let truth = load_ground_truth(corpus.join("ground_truth.json")).unwrap();
    let mask: Vec<f64> =
        truth.semantic_mask_image.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let identity = {
        let mut m = Mat::zeros(8, 8);
        for i in 0..8 {
            m.set(i, i, 1.0);
        }
        m
    };
    let train_config = TrainConfig {
        d: 8,
        epochs: 2,
        j0: 1,
        normalize_tokens: false,
        ..TrainConfig::default()
    };
    let broadcast = ModalityProbabilities {
        pseudo_semantic: mask.clone(),
        pseudo_style: mask.iter().map(|&m| 1.0 - m).collect(),
        epsilon: None,
        per_instance_semantic: vec![mask.clone(); 20],
    };
    let state = TrainState {
        head_image: ProjectionHead::new(Modality::Image, identity.clone()),
        head_text: ProjectionHead::new(Modality::Text, identity),
        bank_image: crossalign::prototypes::PrototypeBank::new(Modality::Image, 8, 2, 1, 2),
        bank_text: crossalign::prototypes::PrototypeBank::new(Modality::Text, 8, 2, 1, 2),
        probs: Some(ProbabilityState {
            sign_mode: train_config.sign_mode,
            epoch: 2,
            image: broadcast.clone(),
            text: broadcast,
        }),
        compactness: None,
        epoch: 2,
        metrics: Vec::new(),
        train_ids: (2..20).collect(),
        val_ids: vec![0, 1],
        rng: rand::SeedableRng::seed_from_u64(0),
        config: train_config,
    };
    let ckpt = dir.path().join("oracle");
    checkpoint::save(&state, &ckpt).unwrap();

    let report_path = dir.path().join("report.json");
    run_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["rsum"].as_f64().unwrap(), 600.0);
}

#[test]
fn inspect_dumps_prototypes_and_histories() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    run_ok(&["gen", "--config", &config, "--out", corpus.to_str().unwrap()]);
    run_ok(&[
        "train",
        "--config",
        &config,
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let output = run_ok(&["inspect", "--checkpoint", run.to_str().unwrap()]);
    let parsed: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!(parsed["banks"]["image"]["prototypes"].is_array());
    assert!(parsed["banks"]["text"]["rsum_history"].is_array());
    assert!(parsed["probabilities"]["image"]["pseudo_semantic"].is_array());
    assert_eq!(parsed["config"]["seed"].as_u64().unwrap(), 5);
}

#[test]
fn export_dist_writes_four_series() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    let csv_path = dir.path().join("dist.csv");
    run_ok(&["gen", "--config", &config, "--out", corpus.to_str().unwrap()]);
    run_ok(&[
        "train",
        "--config",
        &config,
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    run_ok(&[
        "export-dist",
        "--checkpoint",
        run.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("series,pair_id,score"));
    // 24 pairs x 4 series.
    assert_eq!(lines.count(), 96);
    for series in
        ["matched_weighted", "mismatched_weighted", "matched_unweighted", "mismatched_unweighted"]
    {
        assert!(csv.contains(series));
    }
}

#[test]
fn identical_seeds_give_identical_metrics_logs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let corpus = dir.path().join("corpus");
    run_ok(&["gen", "--config", &config, "--out", corpus.to_str().unwrap()]);
    let mut logs = Vec::new();
    for name in ["run_a", "run_b"] {
        let run = dir.path().join(name);
        run_ok(&[
            "train",
            "--config",
            &config,
            "--corpus",
            corpus.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ]);
        logs.push(fs::read(run.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}
