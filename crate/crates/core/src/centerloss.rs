//! Center loss `L_C = ½ Σ_i ||x_i − c_{y_i}||²` and its centroid bookkeeping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::nn::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum CenterLossError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} centers")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// One learned centroid per class (`n` rows of width `d`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Centers<T> {
    classes: usize,
    dim: usize,
    values: Vec<T>,
    /// Step size of the centroid update.
    pub alpha: f64,
    /// Balancing coefficient the centers were trained with.
    pub lambda: f64,
}

impl<T: Scalar> Centers<T> {
    pub fn zeros(classes: usize, dim: usize, alpha: f64, lambda: f64) -> Self {
        Self {
            classes,
            dim,
            values: vec![T::zero(); classes * dim],
            alpha,
            lambda,
        }
    }

    /// Seeded standard normal entries scaled by 0.1.
    pub fn random(classes: usize, dim: usize, alpha: f64, lambda: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..classes * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(0.1 * z)
            })
            .collect();
        Self {
            classes,
            dim,
            values,
            alpha,
            lambda,
        }
    }

    pub fn from_values(classes: usize, dim: usize, values: Vec<T>, alpha: f64, lambda: f64) -> Result<Self, CenterLossError> {
        if values.len() != classes * dim {
            return Err(CenterLossError::DimMismatch {
                expected: classes * dim,
                got: values.len(),
            });
        }
        Ok(Self {
            classes,
            dim,
            values,
            alpha,
            lambda,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn center(&self, class: usize) -> &[T] {
        &self.values[class * self.dim..(class + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `c_j ← c_j − α·Δc_j`
    pub fn apply_deltas(&mut self, deltas: &[T]) {
        let alpha = T::from_f64(self.alpha);
        for (c, &d) in self.values.iter_mut().zip(deltas) {
            *c -= alpha * d;
        }
    }

    fn check(&self, features: &[T], labels: &[usize]) -> Result<(), CenterLossError> {
        if features.len() != labels.len() * self.dim {
            return Err(CenterLossError::DimMismatch {
                expected: labels.len() * self.dim,
                got: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(CenterLossError::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        Ok(())
    }

    /// Index and Euclidean distance of the nearest centroid.
    pub fn nearest(&self, feature: &[T]) -> (usize, f64) {
        (0..self.classes)
            .map(|j| {
                let d2: f64 = feature
                    .iter()
                    .zip(self.center(j))
                    .map(|(&x, &c)| (x.as_f64() - c.as_f64()).powi(2))
                    .sum();
                (j, d2.sqrt())
            })
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }
}

/// Raw center loss `½ Σ_i ||x_i − c_{y_i}||²` (λ not applied).
pub fn center_loss<T: Scalar>(features: &[T], labels: &[usize], centers: &Centers<T>) -> Result<T, CenterLossError> {
    centers.check(features, labels)?;
    let d = centers.dim;
    let half = T::from_f64(0.5);
    let mut total = T::zero();
    for (x, &y) in features.chunks_exact(d).zip(labels) {
        let c = centers.center(y);
        let sq: T = x.iter().zip(c).map(|(&a, &b)| (a - b) * (a - b)).sum();
        total += half * sq;
    }
    Ok(total)
}

/// Gradient of the raw center loss with respect to the features (rows
/// `x_i − c_{y_i}`), and the damped centroid deltas
/// `Δc_j = Σ_{i: y_i = j} (c_j − x_i) / (1 + count_j)`.
pub fn center_loss_grads<T: Scalar>(
    features: &[T],
    labels: &[usize],
    centers: &Centers<T>,
) -> Result<(Vec<T>, Vec<T>), CenterLossError> {
    centers.check(features, labels)?;
    let d = centers.dim;
    let mut grads = Vec::with_capacity(features.len());
    let mut deltas = vec![T::zero(); centers.values.len()];
    let mut counts = vec![0usize; centers.classes];
    for (x, &y) in features.chunks_exact(d).zip(labels) {
        let c = centers.center(y);
        counts[y] += 1;
        let delta = &mut deltas[y * d..(y + 1) * d];
        for ((&xi, &ci), dj) in x.iter().zip(c).zip(delta) {
            grads.push(xi - ci);
            *dj += ci - xi;
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        if count > 0 {
            let denom = T::from_f64(1.0 + count as f64);
            for v in &mut deltas[j * d..(j + 1) * d] {
                *v = *v / denom;
            }
        }
    }
    Ok((grads, deltas))
}

/// `L = L_S + λ·L_C`
pub fn combine<T: Scalar>(softmax_loss: T, center: T, lambda: f64) -> T {
    softmax_loss + T::from_f64(lambda) * center
}
