//! Evaluation: confusion counts, F1, ROC/AUC, 2-D PCA and the CSV emitters.
//!
//! For every OOD metric the positive class is OOD.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("input is empty")]
    EmptyInput,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("ROC needs both normal and OOD samples")]
    SingleClass,
    #[error("score {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("class {class} outside a {n}-class confusion matrix")]
    ClassOutOfRange { class: usize, n: usize },
    #[error("csv output {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

/// Binary class indices used for OOD confusion matrices.
pub const NORMAL: usize = 0;
pub const OOD: usize = 1;

/// `n×n` counts indexed by (true class, predicted class).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n: usize) -> Result<Self, EvalError> {
        if truth.len() != predicted.len() {
            return Err(EvalError::LengthMismatch {
                left: truth.len(),
                right: predicted.len(),
            });
        }
        let mut c = Self::new(n);
        for (&t, &p) in truth.iter().zip(predicted) {
            c.add(t, p)?;
        }
        Ok(c)
    }

    /// Binary OOD matrix from flags (`true` = OOD).
    pub fn from_ood_flags(truth: &[bool], predicted: &[bool]) -> Result<Self, EvalError> {
        let idx = |b: &bool| if *b { OOD } else { NORMAL };
        let t: Vec<usize> = truth.iter().map(idx).collect();
        let p: Vec<usize> = predicted.iter().map(idx).collect();
        Self::from_predictions(&t, &p, 2)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<(), EvalError> {
        for class in [truth, predicted] {
            if class >= self.n {
                return Err(EvalError::ClassOutOfRange { class, n: self.n });
            }
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.n).map(|i| self.get(i, i)).sum();
        if self.total() == 0 {
            0.0
        } else {
            diag as f64 / self.total() as f64
        }
    }

    fn support(&self, class: usize) -> u64 {
        (0..self.n).map(|p| self.get(class, p)).sum()
    }

    fn predicted(&self, class: usize) -> u64 {
        (0..self.n).map(|t| self.get(t, class)).sum()
    }

    /// F1 of one class; 0 when precision or recall is undefined.
    pub fn class_f1(&self, class: usize) -> f64 {
        let tp = self.get(class, class);
        let fp = self.predicted(class) - tp;
        let fn_ = self.support(class) - tp;
        if tp == 0 {
            return 0.0;
        }
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Mode {
    Binary { positive: usize },
    /// Mean over the classes that occur in the truth or in the predictions.
    Macro,
}

pub fn f1(counts: &ConfusionCounts, mode: F1Mode) -> f64 {
    match mode {
        F1Mode::Binary { positive } => counts.class_f1(positive),
        F1Mode::Macro => {
            let present: Vec<f64> = (0..counts.n)
                .filter(|&c| counts.support(c) + counts.predicted(c) > 0)
                .map(|c| counts.class_f1(c))
                .collect();
            macro_average(&present)
        }
    }
}

pub fn macro_average(per_class: &[f64]) -> f64 {
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// Which end of the score axis is anomalous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Distances: large means OOD.
    HigherIsOod,
    /// Normal-class probabilities: small means OOD.
    LowerIsOod,
}

impl Orientation {
    pub fn reversed(self) -> Self {
        match self {
            Self::HigherIsOod => Self::LowerIsOod,
            Self::LowerIsOod => Self::HigherIsOod,
        }
    }

    /// OOD decision at cut point `threshold` (inclusive).
    pub fn flags(self, score: f64, threshold: f64) -> bool {
        match self {
            Self::HigherIsOod => score >= threshold,
            Self::LowerIsOod => score <= threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps every distinct score as a cut point. The first point is `(0, 0)`
/// at an infinite threshold and the last is `(1, 1)`. Tied scores move the
/// curve diagonally, so they count ½ in the trapezoidal AUC.
pub fn roc(scores: &[f64], is_ood: &[bool], orientation: Orientation) -> Result<RocCurve, EvalError> {
    if scores.len() != is_ood.len() {
        return Err(EvalError::LengthMismatch {
            left: scores.len(),
            right: is_ood.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore { index });
    }
    let pos = is_ood.iter().filter(|&&b| b).count() as u64;
    let neg = is_ood.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let sign = match orientation {
        Orientation::HigherIsOod => 1.0,
        Orientation::LowerIsOod => -1.0,
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| (sign * scores[b]).total_cmp(&(sign * scores[a])));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: sign * f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area in units of 1/(pos·neg)
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let cut = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == cut {
            if is_ood[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: cut,
        });
    }
    let auc = area2 as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(RocCurve { points, auc })
}

/// Top-2 principal axes of a feature cloud and the projection of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub singular_values: [f64; 2],
    pub projections: Vec<[f64; 2]>,
}

impl Pca2 {
    /// Centers `x` with the fitted mean and projects it on the components.
    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (o, comp) in out.iter_mut().zip(&self.components) {
            *o = x.iter().zip(&self.mean).zip(comp).map(|((v, m), c)| (v - m) * c).sum();
        }
        out
    }

    /// Variance captured by the two components (`σ² / (M − 1)` summed).
    pub fn projected_variance(&self) -> f64 {
        let m = self.projections.len() as f64;
        self.singular_values.iter().map(|s| s * s).sum::<f64>() / (m - 1.0)
    }
}

/// PCA over the rows of a row-major `m×d` matrix: the top-2 right singular
/// directions of the centered data. Each component is signed so its largest-magnitude entry is
/// positive.
pub fn pca2(features: &[f64], dim: usize) -> Result<Pca2, EvalError> {
    if dim < 2 {
        return Err(EvalError::DegenerateInput(format!("need at least 2 dimensions, got {dim}")));
    }
    if features.len() % dim != 0 {
        return Err(EvalError::LengthMismatch {
            left: features.len(),
            right: dim,
        });
    }
    let m = features.len() / dim;
    if m < 2 {
        return Err(EvalError::DegenerateInput(format!("need at least 2 samples, got {m}")));
    }
    let mut mean = vec![0.0; dim];
    for row in features.chunks_exact(dim) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let centered = DMatrix::from_fn(m, dim, |i, j| features[i * dim + j] - mean[j]);
    // Right singular vectors of the centered data are the eigenvectors of its
    // scatter matrix, with σ² as eigenvalues.
    let eig = centered.tr_mul(&centered).symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sigma = |k: usize| eig.eigenvalues[order[k]].max(0.0).sqrt();
    let scale = mean.iter().map(|v| v.abs()).fold(1.0, f64::max);
    if sigma(0) <= 1e-12 * scale * (m as f64).sqrt() {
        return Err(EvalError::DegenerateInput("all feature vectors are identical".into()));
    }

    let component = |k: usize| -> Vec<f64> {
        let mut c: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        c
    };
    let components = [component(0), component(1)];
    let singular_values = [sigma(0), sigma(1)];
    let mut pca = Pca2 {
        mean,
        components,
        singular_values,
        projections: Vec::with_capacity(m),
    };
    pca.projections = features.chunks_exact(dim).map(|r| pca.project(r)).collect();
    Ok(pca)
}

/// Sample variance summed over all dimensions.
pub fn total_variance(features: &[f64], dim: usize) -> f64 {
    let m = features.len() / dim;
    (0..dim)
        .map(|j| {
            let mean = features.iter().skip(j).step_by(dim).sum::<f64>() / m as f64;
            features.iter().skip(j).step_by(dim).map(|v| (v - mean).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / (m as f64 - 1.0)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub lambda: f64,
    pub seed: u64,
    pub method: String,
    pub f1: f64,
    /// Empty for plain classification.
    pub auc: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub x: f64,
    pub y: f64,
    pub label: i64,
    pub is_ood: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidRow {
    pub class: usize,
    pub x: f64,
    pub y: f64,
}

/// Writes serializable rows with a header line.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), EvalError> {
    let wrap = |source| EvalError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for row in rows {
        w.serialize(row).map_err(wrap)?;
    }
    w.flush().map_err(|e| wrap(e.into()))
}

/// `lambda,seed,method,f1,auc,accuracy`
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<(), EvalError> {
    write_csv(path, rows)
}

/// `fpr,tpr,threshold`
pub fn write_roc(path: &Path, curve: &RocCurve) -> Result<(), EvalError> {
    write_csv(path, &curve.points)
}

/// `x,y,label,is_ood`; OOD rows carry label −1.
pub fn write_projection(path: &Path, pca: &Pca2, labels: &[i64], is_ood: &[bool]) -> Result<(), EvalError> {
    if labels.len() != pca.projections.len() || is_ood.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: pca.projections.len(),
            right: labels.len().min(is_ood.len()),
        });
    }
    let rows: Vec<ProjectionRow> = pca
        .projections
        .iter()
        .zip(labels)
        .zip(is_ood)
        .map(|((p, &label), &is_ood)| ProjectionRow {
            x: p[0],
            y: p[1],
            label,
            is_ood,
        })
        .collect();
    write_csv(path, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], is_ood: &[bool]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if is_ood[i] && !is_ood[j] {
                    pairs += 1;
                    twice += if a > b {
                        2
                    } else if a == b {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn f1_examples() {
        let perfect = ConfusionCounts::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(f1(&perfect, F1Mode::Macro), 1.0);
        // TP=1, FP=1, FN=1 for the positive class
        let c = ConfusionCounts::from_ood_flags(&[true, false, true, false], &[true, true, false, false]).unwrap();
        assert_eq!(f1(&c, F1Mode::Binary { positive: OOD }), 0.5);
        assert_eq!(macro_average(&[1.0, 0.5]), 0.75);
    }

    #[test]
    fn f1_is_zero_when_undefined() {
        let c = ConfusionCounts::from_ood_flags(&[false, false], &[false, false]).unwrap();
        assert_eq!(f1(&c, F1Mode::Binary { positive: OOD }), 0.0);
        assert_eq!(f1(&c, F1Mode::Macro), 1.0);
    }

    #[test]
    fn macro_skips_absent_classes() {
        let c = ConfusionCounts::from_predictions(&[0, 0, 1], &[0, 1, 1], 4).unwrap();
        // class 0: 2/3, class 1: 2/3
        assert!((f1(&c, F1Mode::Macro) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.total(), 3);
        assert!(matches!(c.clone().add(4, 0), Err(EvalError::ClassOutOfRange { .. })));
    }

    #[test]
    fn roc_perfect_and_flat() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let y = [false, false, true, true];
        let curve = roc(&s, &y, Orientation::HigherIsOod).unwrap();
        assert_eq!(curve.auc, 1.0);
        assert!(curve.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));

        let flat = roc(&[3.0; 6], &[true, false, true, false, false, true], Orientation::HigherIsOod).unwrap();
        assert_eq!(flat.auc, 0.5);
        assert_eq!(flat.points.len(), 2);
    }

    #[test]
    fn roc_mixed_matches_pairwise() {
        let s = [0.3, 0.7, 0.7, 0.1];
        let y = [true, false, true, false];
        let curve = roc(&s, &y, Orientation::HigherIsOod).unwrap();
        assert_eq!(curve.auc, brute_auc(&s, &y));
        assert_eq!(curve.auc, 0.625);
        let first = curve.points[0];
        let last = *curve.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn roc_rejects_bad_input() {
        assert!(matches!(roc(&[1.0, 2.0], &[true, true], Orientation::HigherIsOod), Err(EvalError::SingleClass)));
        assert!(matches!(
            roc(&[1.0, f64::NAN], &[true, false], Orientation::HigherIsOod),
            Err(EvalError::NonFiniteScore { index: 1 })
        ));
    }

    #[test]
    fn lower_is_ood_thresholds_flag_consistently() {
        let s = [0.9, 0.2, 0.6, 0.05];
        let y = [false, true, false, true];
        let curve = roc(&s, &y, Orientation::LowerIsOod).unwrap();
        assert_eq!(curve.auc, 1.0);
        for p in &curve.points[1..] {
            let flagged: Vec<bool> = s.iter().map(|&v| Orientation::LowerIsOod.flags(v, p.threshold)).collect();
            let tp = flagged.iter().zip(&y).filter(|(f, t)| **f && **t).count() as f64 / 2.0;
            let fp = flagged.iter().zip(&y).filter(|(f, t)| **f && !**t).count() as f64 / 2.0;
            assert_eq!((fp, tp), (p.fpr, p.tpr));
        }
    }

    /// Largest eigenpair of a 2×2 symmetric matrix in closed form.
    fn top_eigvec_2x2(a: f64, b: f64, c: f64) -> [f64; 2] {
        let l1 = 0.5 * (a + c) + ((0.5 * (a - c)).powi(2) + b * b).sqrt();
        let v = if b.abs() > 1e-300 { [b, l1 - a] } else if a >= c { [1.0, 0.0] } else { [0.0, 1.0] };
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        [v[0] / n, v[1] / n]
    }

    #[test]
    fn pca_matches_covariance_eigenvectors() {
        let pts = [2.5, 2.4, 0.5, 0.7, 2.2, 2.9, 1.9, 2.2, 3.1, 3.0, 2.3, 2.7, 2.0, 1.6, 1.0, 1.1, 1.5, 1.6, 1.1, 0.9];
        let m = pts.len() / 2;
        let mx = pts.iter().step_by(2).sum::<f64>() / m as f64;
        let my = pts.iter().skip(1).step_by(2).sum::<f64>() / m as f64;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for r in pts.chunks(2) {
            a += (r[0] - mx) * (r[0] - mx);
            b += (r[0] - mx) * (r[1] - my);
            c += (r[1] - my) * (r[1] - my);
        }
        let e1 = top_eigvec_2x2(a, b, c);
        let e2 = [-e1[1], e1[0]];
        let pca = pca2(&pts, 2).unwrap();
        for (r, p) in pts.chunks(2).zip(&pca.projections) {
            let want0 = (r[0] - mx) * e1[0] + (r[1] - my) * e1[1];
            let want1 = (r[0] - mx) * e2[0] + (r[1] - my) * e2[1];
            assert!((p[0].abs() - want0.abs()).abs() < 1e-10);
            assert!((p[1].abs() - want1.abs()).abs() < 1e-10);
        }
    }

    #[test]
    fn pca_collinear_points() {
        let pts: Vec<f64> = (0..6).flat_map(|i| [i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let pca = pca2(&pts, 3).unwrap();
        assert!(pca.singular_values[1] < 1e-10);
        assert!(pca.projections.iter().all(|p| p[1].abs() < 1e-10));
    }

    #[test]
    fn pca_rejects_identical_rows() {
        assert!(matches!(pca2(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2), Err(EvalError::DegenerateInput(_))));
        assert!(matches!(pca2(&[1.0, 2.0], 2), Err(EvalError::DegenerateInput(_))));
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn csv_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(
            &p,
            &[MetricRow {
                lambda: 0.1,
                seed: 2,
                method: "mahalanobis".into(),
                f1: 0.5,
                auc: Some(0.75),
                accuracy: 0.9,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "lambda,seed,method,f1,auc,accuracy\n0.1,2,mahalanobis,0.5,0.75,0.9\n");

        let curve = roc(&[0.0, 1.0], &[false, true], Orientation::HigherIsOod).unwrap();
        let p = dir.path().join("r.csv");
        write_roc(&p, &curve).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("fpr,tpr,threshold\n0.0,0.0,inf\n"), "{text}");
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=50).prop_flat_map(|n| {
            (
                prop::collection::vec((0i32..8).prop_map(|v| v as f64 * 0.25), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise_concordance((s, y) in scored()) {
            prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
            let curve = roc(&s, &y, Orientation::HigherIsOod).unwrap();
            prop_assert_eq!(curve.auc, brute_auc(&s, &y));
            for w in curve.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }

        #[test]
        fn auc_translation_and_orientation((s, y) in scored(), shift in -100.0f64..100.0) {
            prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
            let base = roc(&s, &y, Orientation::HigherIsOod).unwrap().auc;
            // dyadic scores keep the shift exact
            let shift = shift.round();
            let moved: Vec<f64> = s.iter().map(|v| v + shift).collect();
            prop_assert_eq!(roc(&moved, &y, Orientation::HigherIsOod).unwrap().auc, base);
            let flipped = roc(&s, &y, Orientation::LowerIsOod).unwrap().auc;
            prop_assert!((flipped - (1.0 - base)).abs() < 1e-12);
        }

        #[test]
        fn macro_f1_invariant_under_relabeling(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let a = f1(&ConfusionCounts::from_predictions(&t, &p, 4).unwrap(), F1Mode::Macro);
            let t2: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
            let p2: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let b = f1(&ConfusionCounts::from_predictions(&t2, &p2, 4).unwrap(), F1Mode::Macro);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn pca_variance_bounded(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 3..20),
        ) {
            let flat: Vec<f64> = rows.concat();
            if let Ok(pca) = pca2(&flat, 4) {
                let total = total_variance(&flat, 4);
                prop_assert!(pca.projected_variance() <= total * (1.0 + 1e-9) + 1e-12);
                let dot: f64 = pca.components[0].iter().zip(&pca.components[1]).map(|(a, b)| a * b).sum();
                prop_assert!(dot.abs() < 1e-8);
                for c in &pca.components {
                    let norm: f64 = c.iter().map(|v| v * v).sum();
                    prop_assert!((norm - 1.0).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn pca_rank_two_keeps_all_variance(
            coeffs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..15),
        ) {
            let (u, v) = ([1.0, 2.0, 0.0, -1.0], [0.0, 1.0, 3.0, 1.0]);
            let flat: Vec<f64> = coeffs.iter().flat_map(|(a, b)| (0..4).map(move |k| a * u[k] + b * v[k])).collect();
            if let Ok(pca) = pca2(&flat, 4) {
                let total = total_variance(&flat, 4);
                prop_assert!((pca.projected_variance() - total).abs() <= 1e-8 * (1.0 + total));
            }
        }
    }
}
