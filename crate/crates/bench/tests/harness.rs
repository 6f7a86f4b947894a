use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use cama_bench::config::{ConfigError, ExperimentConfig};
use cama_bench::models::{checkpoint_roundtrip, load_model_like, save_model, CheckpointError, TrainedModel};
use cama_bench::report::{aggregate, report, XAxis};
use cama_bench::results::{read_csv, ResultRow, ResultsError};
use cama_bench::run::{run, RunError, RunOptions};
use cama_core::cama::{CamaModel, CamaSpec};
use cama_core::stochastics::RngStream;

/// Small enough to train in about a second.
const TINY: &str = r#"
id = "tiny"
kind = "shift-sweep"
seeds = [0]
models = ["cama-generic", "dnn"]
data = { source = "measurement" }
grid = { manipulation = "child", magnitudes = [0.0, 1.5] }

[finetune]
steps = 20

[weights]
k = 4

[train]
width = 16
epochs = 3

[baseline]
epochs = 3
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

fn numeric(rows: &[ResultRow]) -> Vec<(String, f64, f64, f64, f64)> {
    rows.iter()
        .map(|r| (r.model.clone(), r.magnitude, r.finetune_fraction, r.manipulated_accuracy, r.clean_accuracy))
        .collect()
}

#[test]
fn null_manipulation_matches_clean_and_reruns_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&tiny(), dir.path(), RunOptions::default()).unwrap();
    // Two grid points per arm, plus one fine-tuned row per CAMA grid point.
    assert_eq!(out.rows.len(), 6);
    for r in out.rows.iter().filter(|r| r.magnitude == 0.0 && !r.is_finetuned()) {
        assert!((r.manipulated_accuracy - r.clean_accuracy).abs() <= 0.005, "{r:?}");
    }
    for r in &out.rows {
        assert!((0.0..=1.0).contains(&r.manipulated_accuracy) && (0.0..=1.0).contains(&r.clean_accuracy));
        assert_eq!(r.k.is_some(), r.model.starts_with("cama"));
    }
    assert_eq!(read_csv(&out.csv_path).unwrap(), out.rows);

    let again = tempfile::tempdir().unwrap();
    let out2 = run(&tiny(), again.path(), RunOptions::default()).unwrap();
    assert_eq!(numeric(&out.rows), numeric(&out2.rows));
}

#[test]
fn manifest_records_resolved_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&tiny(), dir.path(), RunOptions { train_only: true }).unwrap();
    assert!(out.rows.is_empty());
    assert_eq!(out.checkpoints.len(), 2);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out.manifest_path).unwrap()).unwrap();
    let cfg = &m["config"];
    for (section, key) in [
        ("finetune", "fraction"),
        ("finetune", "learning_rate"),
        ("finetune", "batch_size"),
        ("weights", "lambda"),
        ("weights", "u"),
        ("train", "batch_size"),
        ("baseline", "learning_rate"),
        ("attack", "iterations"),
    ] {
        assert!(!cfg[section][key].is_null(), "{section}.{key} missing from manifest");
    }
    assert_eq!(cfg["finetune"]["fraction"], 0.5);
    // The recorded config reproduces itself.
    let text = m["config_toml"].as_str().unwrap();
    let back = ExperimentConfig::from_toml(text).unwrap();
    assert_eq!(back, back.resolved());
}

#[test]
fn invalid_configs_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.finetune.fraction = Some(0.0);
    assert!(matches!(run(&c, dir.path(), RunOptions::default()), Err(RunError::Config(ConfigError::Invalid(_)))));
    let mut c = tiny();
    c.grid.magnitudes.clear();
    assert!(matches!(run(&c, dir.path(), RunOptions::default()), Err(RunError::Config(_))));

    let mut c = tiny();
    c.train.load_dir = Some(dir.path().join("nowhere"));
    let err = run(&c, dir.path(), RunOptions::default()).unwrap_err();
    assert!(matches!(err, RunError::MissingCheckpoint(_)), "{err}");
    assert!(!dir.path().join("checkpoints").exists(), "nothing written before the error");
}

#[test]
fn loaded_checkpoints_reproduce_the_trained_run() {
    let dir = tempfile::tempdir().unwrap();
    let trained = run(&tiny(), dir.path(), RunOptions::default()).unwrap();
    let mut c = tiny();
    c.train.load_dir = Some(dir.path().join("checkpoints"));
    let again = tempfile::tempdir().unwrap();
    let loaded = run(&c, again.path(), RunOptions::default()).unwrap();
    assert_eq!(numeric(&trained.rows), numeric(&loaded.rows));
}

#[test]
fn checkpoint_round_trip_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let model = TrainedModel::Cama(CamaModel::new(CamaSpec::measurement(8), &RngStream::new(3, 0)).unwrap());
    let path = dir.path().join("m.ckpt");
    let back = checkpoint_roundtrip(&model, &path).unwrap();
    assert_eq!(back.params().checksums(), model.params().checksums());
    assert_eq!(back.params().groups(), model.params().groups());

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 12]).unwrap();
    assert!(load_model_like(&model, &cut).is_err());

    let image = TrainedModel::Cama(CamaModel::new(CamaSpec::image(6, 8), &RngStream::new(3, 0)).unwrap());
    let image_path = dir.path().join("img.ckpt");
    save_model(&image, &image_path).unwrap();
    let err = load_model_like(&model, &image_path).unwrap_err();
    let first_mismatch = model
        .params()
        .iter()
        .zip(image.params().iter())
        .find(|(a, b)| a.0 != b.0 || a.2.shape() != b.2.shape())
        .map(|(a, _)| a.0.to_string())
        .expect("architectures differ");
    assert!(matches!(err, CheckpointError::Grad(_)));
    assert!(err.to_string().contains(&format!("{first_mismatch:?}")), "{err} should name {first_mismatch}");
}

fn fake(model: &str, magnitude: f64, fraction: f64, seed: u64, acc: f64) -> ResultRow {
    ResultRow {
        experiment_id: "fig".into(),
        model: model.into(),
        regime: "clean".into(),
        manipulation: "child".into(),
        magnitude,
        finetune_fraction: fraction,
        seed,
        k: None,
        manipulated_accuracy: acc,
        clean_accuracy: 0.9,
        wall_time_s: 1.0,
    }
}

#[test]
fn report_means_match_hand_aggregation() {
    let mut rows = Vec::new();
    let mut rng = RngStream::new(9, 0);
    for seed in 0..4 {
        for &m in &[0.0, 1.0, 2.0] {
            rows.push(fake("dnn", m, 0.0, seed, rng.uniform(0.0, 1.0)));
            rows.push(fake("cama", m, 0.0, seed, rng.uniform(0.0, 1.0)));
            rows.push(fake("cama", m, 0.5, seed, rng.uniform(0.0, 1.0)));
        }
    }
    let plots = aggregate(&rows);
    assert_eq!(plots.len(), 1);
    let plot = &plots[0];
    assert_eq!(plot.x_axis, XAxis::Magnitude);
    assert_eq!(plot.series_count(), 3);
    // Hand aggregation keyed by (model, fine-tuned, magnitude).
    let mut hand: BTreeMap<(String, bool, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        hand.entry((r.model.clone(), r.is_finetuned(), format!("{}", r.magnitude)))
            .or_default()
            .push(r.manipulated_accuracy);
    }
    for p in &plot.points {
        let v = &hand[&(p.model.clone(), p.finetune != "none", format!("{}", p.x))];
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((p.mean - mean).abs() < 1e-12);
        assert!((p.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(p.n_seeds, 4);
    }
}

#[test]
fn report_single_seed_and_fraction_axis() {
    let rows = vec![
        fake("cama", 0.3, 0.0, 0, 0.1),
        fake("cama", 0.3, 0.01, 0, 0.2),
        fake("cama", 0.3, 1.0, 0, 0.3),
        fake("dnn", 0.3, 0.0, 0, 0.05),
    ];
    let plot = &aggregate(&rows)[0];
    assert_eq!(plot.x_axis, XAxis::FinetuneFraction);
    assert_eq!(plot.series_count(), 2);
    assert!(plot.points.iter().all(|p| p.std == 0.0 && p.n_seeds == 1));
    let xs: Vec<f64> = plot.points.iter().filter(|p| p.model == "cama").map(|p| p.x).collect();
    assert_eq!(xs, vec![0.0, 0.01, 1.0]);
}

#[test]
fn report_rejects_foreign_schema() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    cama_bench::results::write_csv(&good, &[fake("dnn", 0.0, 0.0, 0, 0.5)]).unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "experiment_id,model,accuracy\nfig,dnn,0.5\n").unwrap();
    let err = report(&[good.clone(), bad], &dir.path().join("plots")).unwrap_err();
    assert!(matches!(err, ResultsError::Schema { .. }));
    let written = report(&[good], &dir.path().join("plots")).unwrap();
    assert_eq!(written.len(), 1);
    assert!(written[0].is_file());
}

fn cli(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cama"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn cli_requires_seed_for_sweep_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();

    let no_seed = cli(&["sweep", "--config", cfg], dir.path());
    assert!(!no_seed.status.success());
    assert!(String::from_utf8_lossy(&no_seed.stderr).contains("--seed"));

    let ok = cli(&["sweep", "--config", cfg, "--seed", "1", "--out", "res"], dir.path());
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let rows = read_csv(dir.path().join("res/tiny.csv")).unwrap();
    assert!(rows.iter().all(|r| r.seed == 1));

    let rep = cli(&["report", "--out", "plots", "res/tiny.csv"], dir.path());
    assert!(rep.status.success());
    assert!(dir.path().join("plots/tiny.plot.csv").is_file());

    let bad = cli(&["eval", "--config", cfg, "--seed", "0", "--magnitudes", ""], dir.path());
    assert!(!bad.status.success());

    let data = cli(&["gen-data", "--seed", "4", "--out", "m.csv", "--shift-children", "1"], dir.path());
    assert!(data.status.success());
    let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(text.lines().count(), 1001);
}
