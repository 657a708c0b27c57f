//! Train → calibrate → train-head → evaluate → export, for every (λ, seed).

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::archive::{save_model, ArchiveMeta, ModelState, Provenance};
use super::config::{DatasetSpec, RunConfig};
use super::CliError;
use crate::data::{LabeledDataset, Role};
use crate::detector::DetectorModel;
use crate::evalkit::{
    f1, median, pca2, roc, write_csv, write_metrics, write_projection, write_roc, CentroidRow, ConfusionCounts,
    F1Mode, MetricRow, Orientation, RocCurve, OOD,
};
use crate::head::{classify_ood, train_head, HeadEpoch, OodDecision, OodHead};
use crate::nn::{argmax_rows, Backbone, EpochRecord, Precision, Scalar, TrainConfig, Trainer};

pub const METHOD_CLASSIFICATION: &str = "classification";
pub const METHOD_MAHALANOBIS: &str = "mahalanobis";
pub const METHOD_HEAD: &str = "head";

/// Stage one. Trains in the configured precision and returns 32-bit parameters.
pub fn train_stage_one(
    train: &LabeledDataset,
    cfg: &TrainConfig,
    tap: crate::nn::FeatureTap,
) -> Result<(ModelState, Vec<EpochRecord>), CliError> {
    let stage = |source| CliError::Nn { stage: "train", source };
    if train.rows() != train.cols() {
        return Err(CliError::Config(format!(
            "square images required, got {}×{}",
            train.rows(),
            train.cols()
        )));
    }
    let classes = train.n_classes();
    fn fit<T: Scalar>(
        train: &LabeledDataset,
        classes: usize,
        cfg: &TrainConfig,
        tap: crate::nn::FeatureTap,
    ) -> Result<(Backbone<f32>, crate::Centers<f32>, Vec<EpochRecord>), crate::nn::NnError> {
        let mut trainer = Trainer::<T>::lenet(train.rows(), classes, tap, cfg.clone())?;
        let records = trainer.fit(train)?;
        let (backbone, centers) = trainer.into_parts();
        let centers32 = crate::Centers::from_values(
            centers.classes(),
            centers.dim(),
            centers.values().iter().map(|v| v.as_f64() as f32).collect(),
            centers.alpha,
            centers.lambda,
        )?;
        Ok((backbone.cast(), centers32, records))
    }
    let (backbone, centers, records) = match cfg.precision {
        Precision::F32 => fit::<f32>(train, classes, cfg, tap),
        Precision::F64 => fit::<f64>(train, classes, cfg, tap),
    }
    .map_err(stage)?;
    let meta = ArchiveMeta {
        arch: backbone.spec(),
        classes,
        dim: backbone.feature_dim(),
        lambda: cfg.lambda,
        percentile: crate::detector::DEFAULT_PERCENTILE,
        tau: 0.5,
        seed: cfg.seed,
        class_map: train.class_map().clone(),
        provenance: Provenance {
            train: Some(cfg.clone()),
            head: None,
            epochs: records.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    Ok((
        ModelState {
            meta,
            backbone,
            centers: Some(centers),
            detector: None,
            head: None,
        },
        records,
    ))
}

/// Fits the class Gaussians and thresholds on in-distribution training data only.
pub fn calibrate(model: &mut ModelState, train: &LabeledDataset, percentile: f64, ridge: f64) -> Result<(), CliError> {
    let stage = |source| CliError::Detector {
        stage: "calibrate",
        source,
    };
    let feats = model
        .backbone
        .extract_features(train.images(), train.len())
        .map_err(|source| CliError::Nn {
            stage: "calibrate",
            source,
        })?;
    let mut det = DetectorModel::fit(&feats, train.labels(), model.meta.dim, model.meta.classes, ridge).map_err(stage)?;
    det.calibrate(&feats, train.labels(), percentile).map_err(stage)?;
    model.meta.percentile = percentile;
    model.detector = Some(det);
    Ok(())
}

/// Stage two on frozen features.
pub fn train_second_head(
    model: &mut ModelState,
    main: &LabeledDataset,
    anomaly: &LabeledDataset,
    cfg: &crate::head::HeadConfig,
) -> Result<Vec<HeadEpoch>, CliError> {
    let mut head = OodHead::new(model.meta.dim, cfg.seed);
    let trace = train_head(&model.backbone, &mut head, main, anomaly, cfg).map_err(|source| CliError::Head {
        stage: "train-head",
        source,
    })?;
    model.meta.tau = cfg.tau;
    model.meta.provenance.head = Some(cfg.clone());
    model.head = Some(head);
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub f1: f64,
    pub auc: f64,
    pub accuracy: f64,
}

/// Mean distance to the nearest learned centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub normal_mean_distance: f64,
    pub ood_mean_distance: f64,
}

/// Test-set results of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub classification_f1: f64,
    pub classification_accuracy: f64,
    pub mahalanobis: Option<(OodMetrics, RocCurve)>,
    pub head: Option<(OodMetrics, RocCurve)>,
    pub geometry: Option<Geometry>,
    pub normal_features: Vec<f32>,
    pub normal_labels: Vec<usize>,
    pub ood_features: Vec<f32>,
}

impl Evaluation {
    pub fn metric_rows(&self, lambda: f64, seed: u64) -> Vec<MetricRow> {
        let mut rows = vec![MetricRow {
            lambda,
            seed,
            method: METHOD_CLASSIFICATION.into(),
            f1: self.classification_f1,
            auc: None,
            accuracy: self.classification_accuracy,
        }];
        for (method, m) in [(METHOD_MAHALANOBIS, &self.mahalanobis), (METHOD_HEAD, &self.head)] {
            if let Some((m, _)) = m {
                rows.push(MetricRow {
                    lambda,
                    seed,
                    method: method.into(),
                    f1: m.f1,
                    auc: Some(m.auc),
                    accuracy: m.accuracy,
                });
            }
        }
        rows
    }
}

fn ood_metrics(flags_normal: &[bool], flags_ood: &[bool], scores: &[f64], orientation: Orientation) -> Result<(OodMetrics, RocCurve), CliError> {
    let eval = |source| CliError::Eval { stage: "eval", source };
    let truth: Vec<bool> = std::iter::repeat_n(false, flags_normal.len())
        .chain(std::iter::repeat_n(true, flags_ood.len()))
        .collect();
    let predicted: Vec<bool> = flags_normal.iter().chain(flags_ood).copied().collect();
    let counts = ConfusionCounts::from_ood_flags(&truth, &predicted).map_err(eval)?;
    let curve = roc(scores, &truth, orientation).map_err(eval)?;
    Ok((
        OodMetrics {
            f1: f1(&counts, F1Mode::Binary { positive: OOD }),
            auc: curve.auc,
            accuracy: counts.accuracy(),
        },
        curve,
    ))
}

/// Scores the main test set (classification and both detectors) and the
/// anomaly test set (both detectors). Needs only the stored model state.
pub fn evaluate(model: &ModelState, main_test: &LabeledDataset, anomaly_test: &LabeledDataset) -> Result<Evaluation, CliError> {
    let nn = |source| CliError::Nn { stage: "eval", source };
    let classes = model.meta.classes;
    if let Some(&bad) = main_test.labels().iter().find(|&&l| l >= classes) {
        return Err(CliError::Config(format!(
            "main test label {bad} is outside the model's {classes} classes (check keep/relabel)"
        )));
    }
    let (normal_features, logits) = model.backbone.predict(main_test.images(), main_test.len()).map_err(nn)?;
    let ood_features = model
        .backbone
        .extract_features(anomaly_test.images(), anomaly_test.len())
        .map_err(nn)?;
    let predicted = argmax_rows(&logits, classes);
    let counts = ConfusionCounts::from_predictions(main_test.labels(), &predicted, classes)
        .map_err(|source| CliError::Eval { stage: "eval", source })?;
    let d = model.meta.dim;

    let mahalanobis = match &model.detector {
        Some(det) if det.thresholds.is_some() => {
            let det_err = |source| CliError::Detector { stage: "eval", source };
            let mut flags = [Vec::new(), Vec::new()];
            let mut scores = Vec::with_capacity(main_test.len() + anomaly_test.len());
            for (side, feats) in [&normal_features, &ood_features].into_iter().enumerate() {
                for x in feats.chunks_exact(d) {
                    flags[side].push(!det.is_normal(x).map_err(det_err)?);
                    scores.push(det.anomaly_score(x).map_err(det_err)?);
                }
            }
            Some(ood_metrics(&flags[0], &flags[1], &scores, Orientation::HigherIsOod)?)
        }
        _ => None,
    };

    let head = match &model.head {
        Some(h) => {
            let head_err = |source| CliError::Head { stage: "eval", source };
            let pn = h.predict(&normal_features).map_err(head_err)?;
            let po = h.predict(&ood_features).map_err(head_err)?;
            let is_ood = |p: &f32| classify_ood(*p as f64, h.tau) == OodDecision::Ood;
            let fn_: Vec<bool> = pn.iter().map(is_ood).collect();
            let fo: Vec<bool> = po.iter().map(is_ood).collect();
            let scores: Vec<f64> = pn.iter().chain(&po).map(|&p| p as f64).collect();
            Some(ood_metrics(&fn_, &fo, &scores, Orientation::LowerIsOod)?)
        }
        None => None,
    };

    let geometry = model.centers.as_ref().map(|c| {
        let mean_dist = |feats: &[f32]| {
            let n = feats.len() / d;
            feats.chunks_exact(d).map(|x| c.nearest(x).1).sum::<f64>() / n.max(1) as f64
        };
        Geometry {
            normal_mean_distance: mean_dist(&normal_features),
            ood_mean_distance: mean_dist(&ood_features),
        }
    });

    Ok(Evaluation {
        classification_f1: f1(&counts, F1Mode::Macro),
        classification_accuracy: counts.accuracy(),
        mahalanobis,
        head,
        geometry,
        normal_features,
        normal_labels: main_test.labels().to_vec(),
        ood_features,
    })
}

/// PCA summary of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSummary {
    pub path: PathBuf,
    pub centroids_path: PathBuf,
    /// Largest `|⟨v_i, v_j⟩ − δ_ij|` over the two components.
    pub orthonormality_error: f64,
    pub rows: usize,
}

/// Writes `x,y,label,is_ood` for up to `limit` normal and `limit` OOD test
/// samples, and the learned centroids projected the same way.
pub fn export_projection(
    model: &ModelState,
    eval: &Evaluation,
    limit: usize,
    path: &Path,
    centroids_path: &Path,
) -> Result<ProjectionSummary, CliError> {
    let eval_err = |source| CliError::Eval { stage: "export", source };
    let d = model.meta.dim;
    let nn = (eval.normal_features.len() / d).min(limit);
    let no = (eval.ood_features.len() / d).min(limit);
    let feats: Vec<f64> = eval.normal_features[..nn * d]
        .iter()
        .chain(&eval.ood_features[..no * d])
        .map(|&v| v as f64)
        .collect();
    let pca = pca2(&feats, d).map_err(eval_err)?;
    let labels: Vec<i64> = eval.normal_labels[..nn]
        .iter()
        .map(|&l| l as i64)
        .chain(std::iter::repeat_n(-1, no))
        .collect();
    let is_ood: Vec<bool> = std::iter::repeat_n(false, nn).chain(std::iter::repeat_n(true, no)).collect();
    write_projection(path, &pca, &labels, &is_ood).map_err(eval_err)?;

    let centroids: Vec<CentroidRow> = match &model.centers {
        Some(c) => (0..c.classes())
            .map(|j| {
                let x: Vec<f64> = c.center(j).iter().map(|&v| v as f64).collect();
                let p = pca.project(&x);
                CentroidRow { class: j, x: p[0], y: p[1] }
            })
            .collect(),
        None => Vec::new(),
    };
    write_csv(centroids_path, &centroids).map_err(eval_err)?;

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let [c0, c1] = &pca.components;
    let orthonormality_error = [(dot(c0, c0) - 1.0).abs(), (dot(c1, c1) - 1.0).abs(), dot(c0, c1).abs()]
        .into_iter()
        .fold(0.0, f64::max);
    Ok(ProjectionSummary {
        path: path.to_path_buf(),
        centroids_path: centroids_path.to_path_buf(),
        orthonormality_error,
        rows: nn + no,
    })
}

/// Results of one (λ, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub lambda: f64,
    pub seed: u64,
    pub train_trace: Vec<EpochRecord>,
    pub head_trace: Vec<HeadEpoch>,
    pub thresholds: Vec<f64>,
    /// In-distribution acceptance rate of every class on its own calibration data.
    pub calibration_acceptance: Vec<(usize, f64)>,
    pub classification_f1: f64,
    pub classification_accuracy: f64,
    pub mahalanobis: Option<OodMetrics>,
    pub head: Option<OodMetrics>,
    pub geometry: Option<Geometry>,
    pub projection: Option<ProjectionSummary>,
    pub archive: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub lambda: f64,
    pub method: String,
    pub seeds: usize,
    pub median_f1: f64,
    pub median_auc: Option<f64>,
}

/// In-memory result of [`run_experiment`]; the same numbers are in the CSVs.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub cells: Vec<CellReport>,
    pub metrics: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    /// Data loads and stage transitions in execution order.
    pub events: Vec<String>,
    pub out_dir: PathBuf,
}

impl Report {
    pub fn cell(&self, lambda: f64, seed: u64) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.lambda == lambda && c.seed == seed)
    }

    pub fn median(&self, lambda: f64, method: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.lambda == lambda && r.method == method)
    }
}

/// Formats λ for file names: `0`, `0.1`, `1`.
pub fn lambda_tag(lambda: f64) -> String {
    format!("{lambda}")
}

fn acceptance_rates(det: &DetectorModel, model: &ModelState, train: &LabeledDataset) -> Result<Vec<(usize, f64)>, CliError> {
    let feats = model
        .backbone
        .extract_features(train.images(), train.len())
        .map_err(|source| CliError::Nn {
            stage: "calibrate",
            source,
        })?;
    let thresholds = det.thresholds().map_err(|source| CliError::Detector {
        stage: "calibrate",
        source,
    })?;
    let d = model.meta.dim;
    let mut counts = vec![(0usize, 0usize); model.meta.classes];
    for (x, &y) in feats.chunks_exact(d).zip(train.labels()) {
        let dist = det.stats[y].mahalanobis(&x.iter().map(|&v| v as f64).collect::<Vec<_>>()).map_err(|source| {
            CliError::Detector {
                stage: "calibrate",
                source,
            }
        })?;
        counts[y].1 += 1;
        if dist <= thresholds[y] {
            counts[y].0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(ok, n)| (n, ok as f64 / n.max(1) as f64))
        .collect())
}

/// Lazily loaded datasets. Anomaly sets are only touched when first asked for.
struct DataCache<'a> {
    cfg: &'a RunConfig,
    anomaly_train: Option<Option<LabeledDataset>>,
    anomaly_test: Option<LabeledDataset>,
    events: Vec<String>,
}

impl DataCache<'_> {
    fn load(&mut self, name: &str, spec: &DatasetSpec, role: Role) -> Result<LabeledDataset, CliError> {
        let ds = spec.load(&self.cfg.base_dir, role)?;
        self.events.push(format!("load {name} ({} samples)", ds.len()));
        Ok(ds)
    }

    fn anomaly_train(&mut self) -> Result<Option<&LabeledDataset>, CliError> {
        if self.anomaly_train.is_none() {
            let loaded = match self.cfg.anomaly_train.clone() {
                Some(spec) => Some(self.load("anomaly_train", &spec, Role::Anomaly)?),
                None => None,
            };
            self.anomaly_train = Some(loaded);
        }
        Ok(self.anomaly_train.as_ref().and_then(Option::as_ref))
    }

    fn anomaly_test(&mut self) -> Result<&LabeledDataset, CliError> {
        if self.anomaly_test.is_none() {
            let spec = self.cfg.anomaly_test.clone();
            self.anomaly_test = Some(self.load("anomaly_test", &spec, Role::Anomaly)?);
        }
        Ok(self.anomaly_test.as_ref().expect("just loaded"))
    }
}

/// Runs every (λ, seed) cell and writes `metrics.csv`, `summary.csv`,
/// `roc_{method}_l{λ}_s{seed}.csv`, `projection_l{λ}_s{seed}.csv`,
/// `centroids_l{λ}_s{seed}.csv` and `model_l{λ}_s{seed}.oodn` into the
/// output directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<Report, CliError> {
    cfg.validate()?;
    let out = cfg.out_path();
    fs::create_dir_all(&out).map_err(|e| CliError::Io {
        stage: "setup",
        path: out.clone(),
        source: e,
    })?;
    let mut cache = DataCache {
        cfg,
        anomaly_train: None,
        anomaly_test: None,
        events: Vec::new(),
    };
    let main_train = cache.load("main_train", &cfg.main_train, Role::MainTrain)?;
    let main_test = cache.load("main_test", &cfg.main_test, Role::MainTest)?;

    let mut cells = Vec::new();
    let mut metrics = Vec::new();
    for &lambda in &cfg.lambdas {
        for &seed in &cfg.seeds {
            let tag = format!("l{}_s{seed}", lambda_tag(lambda));
            info!("cell λ={lambda} seed={seed}: stage one");
            let train_cfg = TrainConfig {
                lambda,
                seed,
                ..cfg.train.clone()
            };
            cache.events.push(format!("train {tag}"));
            let (mut model, train_trace) = train_stage_one(&main_train, &train_cfg, cfg.feature_tap)?;
            cache.events.push(format!("calibrate {tag}"));
            calibrate(&mut model, &main_train, cfg.percentile, cfg.ridge)?;
            let det = model.detector.as_ref().expect("calibrated");
            let thresholds = det.thresholds.clone().unwrap_or_default();
            let calibration_acceptance = acceptance_rates(det, &model, &main_train)?;

            let head_trace = match cache.anomaly_train()? {
                Some(anomaly_train) => {
                    info!("cell λ={lambda} seed={seed}: stage two");
                    let head_cfg = crate::head::HeadConfig {
                        seed,
                        tau: cfg.tau,
                        ..cfg.head.clone()
                    };
                    let anomaly_train = anomaly_train.clone();
                    cache.events.push(format!("train-head {tag}"));
                    train_second_head(&mut model, &main_train, &anomaly_train, &head_cfg)?
                }
                None => Vec::new(),
            };

            cache.events.push(format!("eval {tag}"));
            let eval = evaluate(&model, &main_test, cache.anomaly_test()?)?;
            let rows = eval.metric_rows(lambda, seed);
            let eval_err = |source| CliError::Eval { stage: "export", source };
            for (method, m) in [(METHOD_MAHALANOBIS, &eval.mahalanobis), (METHOD_HEAD, &eval.head)] {
                if let Some((_, curve)) = m {
                    write_roc(&out.join(format!("roc_{method}_{tag}.csv")), curve).map_err(eval_err)?;
                }
            }
            let projection = if cfg.projection_limit > 0 {
                Some(export_projection(
                    &model,
                    &eval,
                    cfg.projection_limit,
                    &out.join(format!("projection_{tag}.csv")),
                    &out.join(format!("centroids_{tag}.csv")),
                )?)
            } else {
                None
            };
            let archive = if cfg.save_archives {
                let p = out.join(format!("model_{tag}.oodn"));
                save_model(&p, &model).map_err(|source| CliError::Archive { stage: "save", source })?;
                Some(p)
            } else {
                None
            };
            info!(
                "cell λ={lambda} seed={seed}: classification F1 {:.4}, mahalanobis {:?}, head {:?}",
                eval.classification_f1,
                eval.mahalanobis.as_ref().map(|m| m.0),
                eval.head.as_ref().map(|m| m.0)
            );
            cells.push(CellReport {
                lambda,
                seed,
                train_trace,
                head_trace,
                thresholds,
                calibration_acceptance,
                classification_f1: eval.classification_f1,
                classification_accuracy: eval.classification_accuracy,
                mahalanobis: eval.mahalanobis.map(|m| m.0),
                head: eval.head.map(|m| m.0),
                geometry: eval.geometry,
                projection,
                archive,
            });
            metrics.extend(rows);
        }
    }

    let summary = summarize(&metrics, &cfg.lambdas);
    let csv_err = |source| CliError::Eval { stage: "export", source };
    write_metrics(&out.join("metrics.csv"), &metrics).map_err(csv_err)?;
    write_csv(&out.join("summary.csv"), &summary).map_err(csv_err)?;
    Ok(Report {
        cells,
        metrics,
        summary,
        events: cache.events,
        out_dir: out,
    })
}

/// Median F1 / AUC over seeds for each (λ, method).
pub fn summarize(metrics: &[MetricRow], lambdas: &[f64]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &lambda in lambdas {
        for method in [METHOD_CLASSIFICATION, METHOD_MAHALANOBIS, METHOD_HEAD] {
            let rows: Vec<&MetricRow> = metrics.iter().filter(|r| r.lambda == lambda && r.method == method).collect();
            if rows.is_empty() {
                continue;
            }
            let f1s: Vec<f64> = rows.iter().map(|r| r.f1).collect();
            let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
            out.push(SummaryRow {
                lambda,
                method: method.into(),
                seeds: rows.len(),
                median_f1: median(&f1s).expect("nonempty"),
                median_auc: median(&aucs),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::{DataSource, SyntheticSpec};

    fn spec(classes: usize, per_class: usize, seed: u64, keep: &[usize]) -> DatasetSpec {
        DatasetSpec {
            source: DataSource::Synthetic(SyntheticSpec {
                classes,
                per_class,
                side: 12,
                separation: 3.5,
                seed,
            }),
            keep: None,
            relabel: false,
            limit: None,
        }
        .keep(keep, true)
    }

    #[test]
    fn summary_takes_medians() {
        let row = |seed, f1| MetricRow {
            lambda: 1.0,
            seed,
            method: METHOD_HEAD.into(),
            f1,
            auc: Some(f1),
            accuracy: 0.0,
        };
        let s = summarize(&[row(0, 0.2), row(1, 0.9), row(2, 0.5)], &[1.0]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].median_f1, 0.5);
        assert_eq!(s[0].median_auc, Some(0.5));
    }

    #[test]
    fn lambda_tags() {
        assert_eq!(lambda_tag(0.0), "0");
        assert_eq!(lambda_tag(0.1), "0.1");
        assert_eq!(lambda_tag(1.0), "1");
    }

    #[test]
    fn anomaly_data_is_loaded_after_calibration() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new(spec(4, 100, 0, &[1, 2, 3]), spec(4, 20, 1, &[1, 2, 3]), spec(4, 20, 1, &[0]));
        cfg.anomaly_train = Some(spec(4, 100, 0, &[0]));
        cfg.lambdas = vec![1.0];
        cfg.train.epochs = 1;
        cfg.train.batch_size = 16;
        cfg.head.epochs = 1;
        cfg.out_dir = dir.path().to_path_buf();
        let report = run_experiment(&cfg).unwrap();
        let pos = |prefix: &str| report.events.iter().position(|e| e.starts_with(prefix)).unwrap();
        assert!(pos("calibrate") < pos("load anomaly_train"));
        assert!(pos("calibrate") < pos("load anomaly_test"));
        assert_eq!(report.metrics.len(), 3);
        assert!(dir.path().join("roc_mahalanobis_l1_s0.csv").is_file());
        assert!(dir.path().join("roc_head_l1_s0.csv").is_file());
        assert!(dir.path().join("model_l1_s0.oodn").is_file());
    }
}
