//! Semi-supervised OOD detector over deep features.
//!
//! Each class gets a Gaussian fit (mean, unbiased covariance). A feature is
//! normal when its Mahalanobis distance to at least one class is within that
//! class's threshold, the `q`-th percentile of the class's own training
//! distances. Everything here runs in `f64`.

use thiserror::Error;

use crate::nn::{Backbone, NnError, Scalar};

pub const DEFAULT_PERCENTILE: f64 = 0.975;
/// Ridge added to each covariance, relative to its mean variance `trace(S)/d`.
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("class {class} has {count} samples; {needed} are required")]
    DegenerateClass { class: usize, count: usize, needed: usize },
    #[error("covariance of class {class} is not positive definite after regularization")]
    FactorizationFailure { class: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("detector has no thresholds; run calibrate first")]
    NotCalibrated,
    #[error("percentile must lie in (0, 1], got {0}")]
    InvalidPercentile(f64),
    #[error(transparent)]
    Backbone(#[from] NnError),
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix
/// (row-major `n×n`). `None` when a pivot is not strictly positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let pivot = a[i * n + i] - dot;
                if !(pivot > 0.0) || !pivot.is_finite() {
                    return None;
                }
                l[i * n + i] = pivot.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - dot) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L z = b` for lower-triangular `L`.
fn forward_substitute(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let dot: f64 = (0..i).map(|k| l[i * n + k] * b[k]).sum();
        b[i] = (b[i] - dot) / l[i * n + i];
    }
}

/// Gaussian fit of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub mean: Vec<f64>,
    /// Unbiased sample covariance, row-major `d×d`.
    pub covariance: Vec<f64>,
    /// Ridge actually added to the diagonal before factorization.
    pub ridge: f64,
    pub count: usize,
    chol: Vec<f64>,
}

impl ClassStats {
    /// Rebuilds the factorization of `covariance + ridge·I`.
    pub fn from_parts(
        class: usize,
        mean: Vec<f64>,
        covariance: Vec<f64>,
        ridge: f64,
        count: usize,
    ) -> Result<Self, DetectorError> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(DetectorError::DimMismatch {
                expected: d * d,
                got: covariance.len(),
            });
        }
        let mut reg = covariance.clone();
        for i in 0..d {
            reg[i * d + i] += ridge;
        }
        let chol = cholesky(&reg, d).ok_or(DetectorError::FactorizationFailure { class })?;
        Ok(Self {
            mean,
            covariance,
            ridge,
            count,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `sqrt((x−μ)^T (S+εI)^{-1} (x−μ))` via a triangular solve.
    pub fn mahalanobis(&self, x: &[f64]) -> Result<f64, DetectorError> {
        let d = self.dim();
        if x.len() != d {
            return Err(DetectorError::DimMismatch {
                expected: d,
                got: x.len(),
            });
        }
        let mut z: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        forward_substitute(&self.chol, d, &mut z);
        Ok(z.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

fn widen<T: Scalar>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

/// Per-class mean and unbiased covariance; the factorization uses
/// `S + ε·I` with `ε = ridge · trace(S) / d`.
pub fn fit_stats<T: Scalar>(
    features: &[T],
    labels: &[usize],
    dim: usize,
    classes: usize,
    ridge: f64,
) -> Result<Vec<ClassStats>, DetectorError> {
    if features.len() != labels.len() * dim {
        return Err(DetectorError::DimMismatch {
            expected: labels.len() * dim,
            got: features.len(),
        });
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(DetectorError::DimMismatch {
                expected: classes,
                got: y + 1,
            });
        }
        per_class[y].push(i);
    }

    per_class
        .iter()
        .enumerate()
        .map(|(class, rows)| {
            let count = rows.len();
            if count < dim + 1 {
                return Err(DetectorError::DegenerateClass {
                    class,
                    count,
                    needed: dim + 1,
                });
            }
            let mut mean = vec![0.0; dim];
            for &r in rows {
                for (m, v) in mean.iter_mut().zip(&features[r * dim..(r + 1) * dim]) {
                    *m += v.as_f64();
                }
            }
            for m in &mut mean {
                *m /= count as f64;
            }
            let mut cov = vec![0.0; dim * dim];
            let mut centered = vec![0.0; dim];
            for &r in rows {
                for ((c, v), m) in centered.iter_mut().zip(&features[r * dim..(r + 1) * dim]).zip(&mean) {
                    *c = v.as_f64() - m;
                }
                for i in 0..dim {
                    let ci = centered[i];
                    if ci == 0.0 {
                        continue;
                    }
                    for j in i..dim {
                        cov[i * dim + j] += ci * centered[j];
                    }
                }
            }
            let denom = (count - 1) as f64;
            for i in 0..dim {
                for j in i..dim {
                    let v = cov[i * dim + j] / denom;
                    cov[i * dim + j] = v;
                    cov[j * dim + i] = v;
                }
            }
            let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
            let eps = ridge * trace / dim as f64;
            ClassStats::from_parts(class, mean, cov, eps, count)
        })
        .collect()
}

/// `q`-th percentile with linear interpolation between the closest order
/// statistics (rank `q·(n−1)`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// How a common threshold `t` is swept for ROC curves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SweepMode {
    /// Every class threshold set to the same absolute value `t`; the matching
    /// score is the minimum class distance.
    #[default]
    Absolute,
    /// Every class threshold scaled to `t·θ_y`; the matching score is
    /// `min_y D_y / θ_y`.
    Scaled,
}

/// Fitted class statistics plus (after calibration) per-class thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub stats: Vec<ClassStats>,
    pub thresholds: Option<Vec<f64>>,
    pub percentile: f64,
    pub ridge: f64,
}

impl DetectorModel {
    pub fn fit<T: Scalar>(
        features: &[T],
        labels: &[usize],
        dim: usize,
        classes: usize,
        ridge: f64,
    ) -> Result<Self, DetectorError> {
        Ok(Self {
            stats: fit_stats(features, labels, dim, classes, ridge)?,
            thresholds: None,
            percentile: DEFAULT_PERCENTILE,
            ridge,
        })
    }

    pub fn dim(&self) -> usize {
        self.stats.first().map_or(0, ClassStats::dim)
    }

    pub fn classes(&self) -> usize {
        self.stats.len()
    }

    /// Distance of `x` to every class.
    pub fn distances<T: Scalar>(&self, x: &[T]) -> Result<Vec<f64>, DetectorError> {
        let x = widen(x);
        self.stats.iter().map(|s| s.mahalanobis(&x)).collect()
    }

    /// Sets `θ_y` to the `q`-th percentile of class `y`'s own distances.
    pub fn calibrate<T: Scalar>(&mut self, features: &[T], labels: &[usize], q: f64) -> Result<&[f64], DetectorError> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(DetectorError::InvalidPercentile(q));
        }
        let d = self.dim();
        if features.len() != labels.len() * d {
            return Err(DetectorError::DimMismatch {
                expected: labels.len() * d,
                got: features.len(),
            });
        }
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); self.classes()];
        for (x, &y) in features.chunks_exact(d).zip(labels) {
            let stats = self.stats.get(y).ok_or(DetectorError::DimMismatch {
                expected: self.classes(),
                got: y + 1,
            })?;
            per_class[y].push(stats.mahalanobis(&widen(x))?);
        }
        let thresholds = per_class
            .iter()
            .enumerate()
            .map(|(class, dists)| {
                if dists.is_empty() {
                    Err(DetectorError::DegenerateClass {
                        class,
                        count: 0,
                        needed: 1,
                    })
                } else {
                    Ok(percentile(dists, q))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.percentile = q;
        self.thresholds = Some(thresholds);
        Ok(self.thresholds.as_deref().unwrap())
    }

    pub fn thresholds(&self) -> Result<&[f64], DetectorError> {
        self.thresholds.as_deref().ok_or(DetectorError::NotCalibrated)
    }

    /// `Q(x)`: true (normal) when some class has `D_y(x) ≤ θ_y`.
    pub fn is_normal<T: Scalar>(&self, x: &[T]) -> Result<bool, DetectorError> {
        let thresholds = self.thresholds()?;
        Ok(accepts(&self.distances(x)?, thresholds))
    }

    /// `P(X) = Q(T(X))` for a single image.
    pub fn detect(&self, backbone: &Backbone<f32>, image: &[f32]) -> Result<bool, DetectorError> {
        let feature = backbone.extract_features(image, 1)?;
        self.is_normal(&feature)
    }

    /// Minimum class distance; higher means more anomalous.
    pub fn anomaly_score<T: Scalar>(&self, x: &[T]) -> Result<f64, DetectorError> {
        if self.stats.is_empty() {
            return Err(DetectorError::NotCalibrated);
        }
        Ok(min_of(&self.distances(x)?))
    }

    /// Score matching a sweep mode: thresholding it at `t` reproduces `Q` with
    /// all class thresholds set (or scaled) to `t`.
    pub fn sweep_score<T: Scalar>(&self, x: &[T], mode: SweepMode) -> Result<f64, DetectorError> {
        match mode {
            SweepMode::Absolute => self.anomaly_score(x),
            SweepMode::Scaled => {
                let thresholds = self.thresholds()?;
                let d = self.distances(x)?;
                Ok(d.iter().zip(thresholds).map(|(d, t)| d / t).fold(f64::INFINITY, f64::min))
            }
        }
    }
}

/// Disjunction over classes of `distance ≤ threshold` (inclusive).
pub fn accepts(distances: &[f64], thresholds: &[f64]) -> bool {
    distances.iter().zip(thresholds).any(|(d, t)| d <= t)
}

fn min_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_stats(d: usize) -> ClassStats {
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        ClassStats::from_parts(0, vec![0.0; d], cov, 0.0, d + 1).unwrap()
    }

    #[test]
    fn mean_of_two_points() {
        let feats = [0.0f64, 0.0, 2.0, 2.0, 1.0, 3.0];
        let stats = fit_stats(&feats, &[0, 0, 0], 2, 1, 1e-6).unwrap();
        assert_eq!(stats[0].mean, vec![1.0, 5.0 / 3.0]);
    }

    #[test]
    fn covariance_of_square_corners() {
        let feats = [0.0f64, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0];
        let stats = fit_stats(&feats, &[0; 4], 2, 1, 1e-6).unwrap();
        let s = &stats[0].covariance;
        // direct summation: Σ(x−1)² / 3 = 4/3, cross terms cancel
        assert!((s[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((s[3] - 4.0 / 3.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12 && s[2].abs() < 1e-12);
        assert!((stats[0].ridge - 1e-6 * 4.0 / 3.0).abs() < 1e-18);
    }

    #[test]
    fn single_sample_class_is_degenerate() {
        let err = fit_stats(&[1.0f64, 2.0], &[0], 2, 1, 1e-6).unwrap_err();
        assert_eq!(
            err,
            DetectorError::DegenerateClass {
                class: 0,
                count: 1,
                needed: 3
            }
        );
    }

    #[test]
    fn constant_class_cannot_be_factorized() {
        let feats = [1.0f64; 6];
        assert_eq!(
            fit_stats(&feats, &[0, 0, 0], 2, 1, 1e-6).unwrap_err(),
            DetectorError::FactorizationFailure { class: 0 }
        );
    }

    #[test]
    fn identity_covariance_gives_euclidean() {
        let s = identity_stats(2);
        assert!((s.mahalanobis(&[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(s.mahalanobis(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(s.mahalanobis(&[1.0]), Err(DetectorError::DimMismatch { .. })));
    }

    #[test]
    fn correlated_covariance_value() {
        let s = ClassStats::from_parts(0, vec![0.0, 0.0], vec![2.0, 1.0, 1.0, 2.0], 0.0, 3).unwrap();
        // S z = (1,1) → z = (1/3, 1/3); (x·z) = 2/3
        let want = (2.0f64 / 3.0).sqrt();
        assert!((s.mahalanobis(&[1.0, 1.0]).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.816497).abs() < 1e-6);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        assert!((percentile(&v, 0.975) - 39.025).abs() < 1e-12);
        assert_eq!(percentile(&v, 1.0), 40.0);
        assert_eq!(percentile(&[2.5; 7], 0.3), 2.5);
    }

    fn calibrated(thresholds: Vec<f64>) -> DetectorModel {
        DetectorModel {
            stats: (0..thresholds.len()).map(|_| identity_stats(1)).collect(),
            thresholds: Some(thresholds),
            percentile: 0.975,
            ridge: 0.0,
        }
    }

    #[test]
    fn disjunctive_criterion() {
        assert!(accepts(&[0.5, 2.0, 3.0], &[1.0, 1.0, 1.0]));
        assert!(!accepts(&[1.5, 2.0, 3.0], &[1.0, 1.0, 1.0]));
        assert!(accepts(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]));
    }

    #[test]
    fn scores_and_calibration_state() {
        let mut det = calibrated(vec![1.0]);
        assert!(det.is_normal(&[1.0f64]).unwrap());
        assert!(!det.is_normal(&[1.5f64]).unwrap());
        assert_eq!(det.anomaly_score(&[-0.5f64]).unwrap(), 0.5);
        det.thresholds = None;
        assert_eq!(det.is_normal(&[0.0f64]), Err(DetectorError::NotCalibrated));
    }

    #[test]
    fn calibrate_rejects_bad_percentile() {
        let mut det = calibrated(vec![1.0]);
        assert_eq!(
            det.calibrate(&[0.0f64], &[0], 0.0).unwrap_err(),
            DetectorError::InvalidPercentile(0.0)
        );
    }

    /// Naive `(x−μ)^T S^{-1} (x−μ)` through Gauss-Jordan elimination with pivoting.
    fn explicit_inverse_distance(s: &[f64], d: usize, diff: &[f64]) -> f64 {
        let mut aug = vec![0.0; d * 2 * d];
        for i in 0..d {
            for j in 0..d {
                aug[i * 2 * d + j] = s[i * d + j];
            }
            aug[i * 2 * d + d + i] = 1.0;
        }
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&a, &b| aug[a * 2 * d + col].abs().total_cmp(&aug[b * 2 * d + col].abs()))
                .unwrap();
            for k in 0..2 * d {
                aug.swap(col * 2 * d + k, piv * 2 * d + k);
            }
            let p = aug[col * 2 * d + col];
            for k in 0..2 * d {
                aug[col * 2 * d + k] /= p;
            }
            for r in 0..d {
                if r != col {
                    let f = aug[r * 2 * d + col];
                    for k in 0..2 * d {
                        aug[r * 2 * d + k] -= f * aug[col * 2 * d + k];
                    }
                }
            }
        }
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += diff[i] * aug[i * 2 * d + d + j] * diff[j];
            }
        }
        q.sqrt()
    }

    fn spd_strategy() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..=10).prop_flat_map(|d| {
            (
                Just(d),
                prop::collection::vec(-1.0f64..1.0, d * d),
                prop::collection::vec(-3.0f64..3.0, d),
                prop::collection::vec(-3.0f64..3.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn factorized_distance_matches_explicit_inverse((d, a, mu, x) in spd_strategy()) {
            // S = A Aᵀ + 0.5 I is symmetric positive definite
            let mut s = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    s[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>();
                }
                s[i * d + i] += 0.5;
            }
            let stats = ClassStats::from_parts(0, mu.clone(), s.clone(), 0.0, d + 1).unwrap();
            let diff: Vec<f64> = x.iter().zip(&mu).map(|(a, b)| a - b).collect();
            let fast = stats.mahalanobis(&x).unwrap();
            let slow = explicit_inverse_distance(&s, d, &diff);
            prop_assert!((fast - slow).abs() <= 1e-8 * slow.max(1e-12), "{fast} vs {slow}");
            prop_assert_eq!(stats.mahalanobis(&mu).unwrap(), 0.0);
        }

        #[test]
        fn raising_a_threshold_never_rejects(
            dist in prop::collection::vec(0.0f64..5.0, 1..6),
            thr in prop::collection::vec(0.0f64..5.0, 6),
            which in 0usize..6,
            bump in 0.0f64..3.0,
        ) {
            let t = &thr[..dist.len()];
            let mut raised = t.to_vec();
            raised[which % dist.len()] += bump;
            if accepts(&dist, t) {
                prop_assert!(accepts(&dist, &raised));
            }
        }

        #[test]
        fn min_score_matches_common_threshold(
            dist in prop::collection::vec(0.0f64..6.0, 1..6),
        ) {
            let score = min_of(&dist);
            for step in 0..=60 {
                let t = step as f64 * 0.1;
                let common = vec![t; dist.len()];
                prop_assert_eq!(score <= t, accepts(&dist, &common));
            }
        }
    }
}
