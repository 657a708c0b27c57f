//! Subcommands of the `oodnet` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::archive::{load_model, save_model, ModelState};
use super::config::RunConfig;
use super::experiment::{
    calibrate, evaluate, lambda_tag, run_experiment, train_second_head, train_stage_one, METHOD_HEAD,
    METHOD_MAHALANOBIS,
};
use super::CliError;
use crate::data::{normalize, parse_idx, IdxData, Role};
use crate::evalkit::{write_metrics, write_roc};
use crate::head::{classify_ood, HeadConfig};
use crate::nn::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "oodnet", version, about = "LeNet classifier with Mahalanobis and supervised OOD detection")]
pub struct Cli {
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Use this λ instead of the configured sweep.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Use this seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, CliError> {
        let cfg = RunConfig::load(&self.config)?.with_overrides(self.lambda, self.seed, self.out.clone());
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct WithModel {
    #[command(flatten)]
    pub common: Common,
    /// Model archive (default: `<out>/model.oodn`).
    #[arg(long)]
    pub model: Option<PathBuf>,
}

impl WithModel {
    fn model_path(&self, cfg: &RunConfig) -> PathBuf {
        self.model.clone().unwrap_or_else(|| cfg.out_path().join("model.oodn"))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stage one: train the backbone and centroids on the main training set.
    Train(WithModel),
    /// Fit class Gaussians and percentile thresholds on the main training set.
    Calibrate(WithModel),
    /// Stage two: train the OOD head on frozen features.
    TrainHead(WithModel),
    /// Evaluate a model on the test sets and write metrics and ROC points.
    Eval(WithModel),
    /// Score every image of an IDX image file.
    Score {
        /// IDX image file.
        image_file: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Write deep features of the test sets as CSV.
    ExportFeatures(WithModel),
    /// Full sweep over the configured λ values and seeds.
    RunExperiment(Common),
}

fn first_cell(cfg: &RunConfig) -> (f64, u64) {
    (cfg.lambdas[0], cfg.seeds[0])
}

fn load(path: &Path) -> Result<ModelState, CliError> {
    load_model(path).map_err(|source| CliError::Archive { stage: "load", source })
}

fn save(path: &Path, model: &ModelState) -> Result<(), CliError> {
    save_model(path, model).map_err(|source| CliError::Archive { stage: "save", source })
}

fn io_err<'a>(stage: &'static str, path: &'a Path) -> impl Fn(std::io::Error) -> CliError + 'a {
    move |source| CliError::Io {
        stage,
        path: path.to_path_buf(),
        source,
    }
}

/// Executes one command, writing human-readable results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let stdout_err = |source| CliError::Io {
        stage: "output",
        path: PathBuf::from("<stdout>"),
        source,
    };
    match cli.command {
        Command::Train(args) => {
            let cfg = args.common.config()?;
            let (lambda, seed) = first_cell(&cfg);
            let train = cfg.main_train.load(&cfg.base_dir, Role::MainTrain)?;
            let train_cfg = TrainConfig {
                lambda,
                seed,
                ..cfg.train.clone()
            };
            let (model, trace) = train_stage_one(&train, &train_cfg, cfg.feature_tap)?;
            let path = args.model_path(&cfg);
            save(&path, &model)?;
            for r in &trace {
                writeln!(out, "epoch {} loss {:.5} accuracy {:.4}", r.epoch, r.loss, r.accuracy).map_err(stdout_err)?;
            }
            writeln!(out, "saved {}", path.display()).map_err(stdout_err)?;
        }
        Command::Calibrate(args) => {
            let cfg = args.common.config()?;
            let path = args.model_path(&cfg);
            let mut model = load(&path)?;
            let train = cfg.main_train.load(&cfg.base_dir, Role::MainTrain)?;
            calibrate(&mut model, &train, cfg.percentile, cfg.ridge)?;
            save(&path, &model)?;
            let thresholds = model.detector.as_ref().and_then(|d| d.thresholds.clone()).unwrap_or_default();
            writeln!(out, "thresholds {thresholds:?}").map_err(stdout_err)?;
        }
        Command::TrainHead(args) => {
            let cfg = args.common.config()?;
            let path = args.model_path(&cfg);
            let mut model = load(&path)?;
            let spec = cfg
                .anomaly_train
                .as_ref()
                .ok_or_else(|| CliError::Config("train-head needs anomaly_train in the config".into()))?;
            let main = cfg.main_train.load(&cfg.base_dir, Role::MainTrain)?;
            let anomaly = spec.load(&cfg.base_dir, Role::Anomaly)?;
            let head_cfg = HeadConfig {
                seed: model.meta.seed,
                tau: cfg.tau,
                ..cfg.head.clone()
            };
            let trace = train_second_head(&mut model, &main, &anomaly, &head_cfg)?;
            save(&path, &model)?;
            for r in &trace {
                writeln!(out, "head epoch {} loss {:.5} accuracy {:.4}", r.epoch, r.loss, r.accuracy).map_err(stdout_err)?;
            }
        }
        Command::Eval(args) => {
            let cfg = args.common.config()?;
            let model = load(&args.model_path(&cfg))?;
            let main_test = cfg.main_test.load(&cfg.base_dir, Role::MainTest)?;
            let anomaly_test = cfg.anomaly_test.load(&cfg.base_dir, Role::Anomaly)?;
            let eval = evaluate(&model, &main_test, &anomaly_test)?;
            let rows = eval.metric_rows(model.meta.lambda, model.meta.seed);
            let dir = cfg.out_path();
            std::fs::create_dir_all(&dir).map_err(io_err("eval", &dir))?;
            let csv_err = |source| CliError::Eval { stage: "eval", source };
            write_metrics(&dir.join("eval_metrics.csv"), &rows).map_err(csv_err)?;
            let tag = format!("l{}_s{}", lambda_tag(model.meta.lambda), model.meta.seed);
            for (method, m) in [(METHOD_MAHALANOBIS, &eval.mahalanobis), (METHOD_HEAD, &eval.head)] {
                if let Some((_, curve)) = m {
                    write_roc(&dir.join(format!("roc_{method}_{tag}.csv")), curve).map_err(csv_err)?;
                }
            }
            for r in &rows {
                let auc = r.auc.map_or("-".to_string(), |a| format!("{a:.4}"));
                writeln!(out, "{:<15} f1 {:.4} auc {auc} accuracy {:.4}", r.method, r.f1, r.accuracy).map_err(stdout_err)?;
            }
        }
        Command::Score { image_file, model } => {
            let model = load(&model)?;
            let bytes = std::fs::read(&image_file).map_err(io_err("score", &image_file))?;
            let data_err = |source| CliError::Data { stage: "score", source };
            let (count, pixels) = match parse_idx(&bytes).map_err(data_err)? {
                IdxData::Images { count, rows, cols, pixels } => {
                    let a = &model.meta.arch;
                    if (rows, cols) != (a.input_height, a.input_width) {
                        return Err(CliError::Config(format!(
                            "images are {rows}×{cols}, the model expects {}×{}",
                            a.input_height, a.input_width
                        )));
                    }
                    (count, normalize(&pixels))
                }
                IdxData::Labels(_) => return Err(CliError::Config(format!("{} is a label file", image_file.display()))),
            };
            let (features, logits) = model
                .backbone
                .predict(&pixels, count)
                .map_err(|source| CliError::Nn { stage: "score", source })?;
            let classes = model.meta.classes;
            let predicted = crate::nn::argmax_rows(&logits, classes);
            let original: std::collections::BTreeMap<usize, usize> =
                model.meta.class_map.iter().map(|(&o, &d)| (d, o)).collect();
            writeln!(out, "index,class,label,min_distance,mahalanobis,head_probability,head").map_err(stdout_err)?;
            for (i, x) in features.chunks_exact(model.meta.dim).enumerate() {
                let det_err = |source| CliError::Detector { stage: "score", source };
                let (dist, verdict) = match &model.detector {
                    Some(det) if det.thresholds.is_some() => (
                        format!("{:.6}", det.anomaly_score(x).map_err(det_err)?),
                        if det.is_normal(x).map_err(det_err)? { "normal" } else { "ood" }.to_string(),
                    ),
                    _ => (String::new(), String::new()),
                };
                let (p, decision) = match &model.head {
                    Some(h) => {
                        let p = h.head_forward(x).map_err(|source| CliError::Head { stage: "score", source })?;
                        (format!("{p:.6}"), format!("{:?}", classify_ood(p as f64, h.tau)).to_lowercase())
                    }
                    None => (String::new(), String::new()),
                };
                let label = original.get(&predicted[i]).copied().unwrap_or(predicted[i]);
                writeln!(out, "{i},{},{label},{dist},{verdict},{p},{decision}", predicted[i]).map_err(stdout_err)?;
            }
        }
        Command::ExportFeatures(args) => {
            let cfg = args.common.config()?;
            let model = load(&args.model_path(&cfg))?;
            let main_test = cfg.main_test.load(&cfg.base_dir, Role::MainTest)?;
            let anomaly_test = cfg.anomaly_test.load(&cfg.base_dir, Role::Anomaly)?;
            let dir = cfg.out_path();
            std::fs::create_dir_all(&dir).map_err(io_err("export", &dir))?;
            let path = dir.join("features.csv");
            let rows = write_features(&model, &main_test, &anomaly_test, &path)?;
            writeln!(out, "wrote {rows} rows to {}", path.display()).map_err(stdout_err)?;
        }
        Command::RunExperiment(common) => {
            let cfg = common.config()?;
            let report = run_experiment(&cfg)?;
            writeln!(out, "lambda,method,seeds,median_f1,median_auc").map_err(stdout_err)?;
            for r in &report.summary {
                let auc = r.median_auc.map_or(String::new(), |a| format!("{a:.4}"));
                writeln!(out, "{},{},{},{:.4},{auc}", r.lambda, r.method, r.seeds, r.median_f1).map_err(stdout_err)?;
            }
            writeln!(out, "outputs in {}", report.out_dir.display()).map_err(stdout_err)?;
        }
    }
    Ok(())
}

/// `label,is_ood,f0,…,f{d−1}`; OOD rows carry label −1.
fn write_features(
    model: &ModelState,
    main: &crate::data::LabeledDataset,
    anomaly: &crate::data::LabeledDataset,
    path: &Path,
) -> Result<usize, CliError> {
    let nn = |source| CliError::Nn { stage: "export", source };
    let csv_err = |e: csv::Error| CliError::Eval {
        stage: "export",
        source: crate::evalkit::EvalError::Csv {
            path: path.display().to_string(),
            source: e,
        },
    };
    let d = model.meta.dim;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["label".to_string(), "is_ood".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    let normal = model.backbone.extract_features(main.images(), main.len()).map_err(nn)?;
    let ood = model.backbone.extract_features(anomaly.images(), anomaly.len()).map_err(nn)?;
    let mut rows = 0;
    for (feats, labels, is_ood) in [
        (&normal, main.labels().iter().map(|&l| l as i64).collect::<Vec<_>>(), false),
        (&ood, vec![-1; anomaly.len()], true),
    ] {
        for (x, label) in feats.chunks_exact(d).zip(labels) {
            let mut rec = vec![label.to_string(), is_ood.to_string()];
            rec.extend(x.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| csv_err(e.into()))?;
    Ok(rows)
}
