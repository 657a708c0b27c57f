use std::path::{Path, PathBuf};

use clap::Parser;
use oodnet::cli::experiment::{METHOD_CLASSIFICATION, METHOD_HEAD, METHOD_MAHALANOBIS};
use oodnet::cli::{evaluate, load_model, run, run_experiment, Cli, CliError, DataSource, DatasetSpec, RunConfig, SyntheticSpec};
use oodnet::data::{encode_idx, IdxData, Role};

fn synthetic(classes: usize, per_class: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        source: DataSource::Synthetic(SyntheticSpec {
            classes,
            per_class,
            side: 12,
            separation: 3.0,
            seed,
        }),
        keep: None,
        relabel: false,
        limit: None,
    }
}

fn config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(
        synthetic(4, 100, 1).keep(&[1, 2, 3], true),
        synthetic(4, 20, 2).keep(&[1, 2, 3], true),
        synthetic(4, 20, 2).keep(&[0], false),
    );
    cfg.anomaly_train = Some(synthetic(4, 100, 1).keep(&[0], false));
    cfg.train.epochs = 1;
    cfg.head.epochs = 2;
    cfg.lambdas = vec![0.0, 0.1, 1.0];
    cfg.projection_limit = 50;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn cli(args: &[&str]) -> Result<String, CliError> {
    let parsed = Cli::try_parse_from(std::iter::once("oodnet").chain(args.iter().copied())).unwrap();
    let mut out = Vec::new();
    run(parsed, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

#[test]
fn staged_commands_produce_a_scoring_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg_path = write_config(dir.path(), &config(&out));
    let cfg = cfg_path.to_str().unwrap();
    let base = ["--config", cfg, "--lambda", "1", "--seed", "4"];

    let log = cli(&[&["train"][..], &base].concat()).unwrap();
    assert!(log.contains("epoch 0"), "{log}");
    let model = out.join("model.oodn");
    assert!(model.exists());

    let log = cli(&[&["calibrate"][..], &base].concat()).unwrap();
    assert!(log.starts_with("thresholds ["), "{log}");
    cli(&[&["train-head"][..], &base].concat()).unwrap();

    let log = cli(&[&["eval"][..], &base].concat()).unwrap();
    for method in [METHOD_CLASSIFICATION, METHOD_MAHALANOBIS, METHOD_HEAD] {
        assert!(log.contains(method), "{log}");
    }
    assert!(out.join("eval_metrics.csv").exists());
    assert!(out.join("roc_mahalanobis_l1_s4.csv").exists());
    assert!(out.join("roc_head_l1_s4.csv").exists());

    let log = cli(&[&["export-features"][..], &base].concat()).unwrap();
    assert!(log.contains("wrote 80 rows"), "{log}");
    let features = std::fs::read_to_string(out.join("features.csv")).unwrap();
    assert!(features.starts_with("label,is_ood,f0,f1,"));
    assert_eq!(features.lines().count(), 81);

    let state = load_model(&model).unwrap();
    assert_eq!(state.meta.lambda, 1.0);
    assert_eq!(state.meta.seed, 4);
    assert!(state.detector.is_some() && state.head.is_some());

    let images = dir.path().join("images.idx");
    let pixels: Vec<u8> = (0..3 * 144).map(|i| (i * 37 % 256) as u8).collect();
    let idx = IdxData::Images {
        count: 3,
        rows: 12,
        cols: 12,
        pixels,
    };
    std::fs::write(&images, encode_idx(&idx)).unwrap();
    let scores = cli(&["score", images.to_str().unwrap(), "--model", model.to_str().unwrap()]).unwrap();
    let lines: Vec<&str> = scores.lines().collect();
    assert_eq!(lines[0], "index,class,label,min_distance,mahalanobis,head_probability,head");
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 7);
        assert!(fields[3].parse::<f64>().unwrap() >= 0.0);
        assert!(["normal", "ood"].contains(&fields[4]));
        let p: f64 = fields[5].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn score_rejects_mismatched_image_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg_path = write_config(dir.path(), &config(&out));
    cli(&["train", "--config", cfg_path.to_str().unwrap()]).unwrap();
    let images = dir.path().join("big.idx");
    let idx = IdxData::Images {
        count: 1,
        rows: 28,
        cols: 28,
        pixels: vec![0; 784],
    };
    std::fs::write(&images, encode_idx(&idx)).unwrap();
    let model = out.join("model.oodn");
    let err = cli(&["score", images.to_str().unwrap(), "--model", model.to_str().unwrap()]).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
}

#[test]
fn missing_dataset_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&dir.path().join("out"));
    cfg.main_train = DatasetSpec::idx("nowhere/train-images", "nowhere/train-labels");
    let cfg_path = write_config(dir.path(), &cfg);
    let err = cli(&["train", "--config", cfg_path.to_str().unwrap()]).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert!(err.to_string().contains("nowhere/train-images"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn commands_on_a_missing_model_fail_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &config(&dir.path().join("out")));
    let err = cli(&["eval", "--config", cfg_path.to_str().unwrap()]).unwrap_err();
    assert!(err.to_string().starts_with("[load]"), "{err}");
}

#[test]
fn sweep_reports_every_lambda_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_experiment(&config(&dir.path().join("a"))).unwrap();
    let second = run_experiment(&config(&dir.path().join("b"))).unwrap();

    for method in [METHOD_CLASSIFICATION, METHOD_MAHALANOBIS, METHOD_HEAD] {
        let lambdas: Vec<f64> = first.metrics.iter().filter(|r| r.method == method).map(|r| r.lambda).collect();
        assert_eq!(lambdas, vec![0.0, 0.1, 1.0], "{method}");
    }
    assert_eq!(first.metrics, second.metrics);
    for name in ["metrics.csv", "summary.csv", "roc_mahalanobis_l0.1_s0.csv", "projection_l1_s0.csv"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn archived_cells_reevaluate_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("out"));
    let report = run_experiment(&cfg).unwrap();
    let main_test = cfg.main_test.load(&cfg.base_dir, Role::MainTest).unwrap();
    let anomaly_test = cfg.anomaly_test.load(&cfg.base_dir, Role::Anomaly).unwrap();
    for cell in &report.cells {
        let model = load_model(cell.archive.as_ref().unwrap()).unwrap();
        let ev = evaluate(&model, &main_test, &anomaly_test).unwrap();
        assert_eq!(ev.classification_f1, cell.classification_f1);
        assert_eq!(ev.mahalanobis.map(|m| m.0), cell.mahalanobis);
        assert_eq!(ev.head.map(|m| m.0), cell.head);
        assert_eq!(ev.geometry, cell.geometry);
    }
}
