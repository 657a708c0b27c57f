//! Supervised OOD head: a 256-256-1 perceptron with a sigmoid output, trained
//! with binary cross-entropy on the frozen deep features of the backbone.
//!
//! Label convention: anomaly samples are class 0, in-distribution samples are
//! class 1, so the output is the probability of being normal.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::nn::gradcheck::{check_against_central_differences, GradCheckConfig, GradCheckReport};
use crate::nn::layers::{relu_backward, relu_forward, Dense};
use crate::nn::{Backbone, NnError, Scalar, Sgd, Tensor};

pub const HIDDEN: usize = 256;
/// Probability clamp used by [`bce`].
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("invalid head config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backbone(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodDecision {
    Normal,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tau: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 3,
            seed: 0,
            tau: 0.5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if self.batch_size == 0 {
            return Err(HeadError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(HeadError::InvalidConfig(format!(
                "learning_rate {} / momentum {} out of range",
                self.learning_rate, self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(HeadError::InvalidConfig(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodHead<T> {
    dim: usize,
    l1: Dense<T>,
    l2: Dense<T>,
    l3: Dense<T>,
    /// Decision threshold on the normal-class probability.
    pub tau: f64,
}

/// Activations kept for the backward pass.
struct HeadTrace<T> {
    h1: Vec<T>,
    h2: Vec<T>,
    probs: Vec<T>,
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> OodHead<T> {
    /// He-initialised layers, zero biases.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dim,
            l1: Dense::he(dim, HIDDEN, &mut rng),
            l2: Dense::he(HIDDEN, HIDDEN, &mut rng),
            l3: Dense::he(HIDDEN, 1, &mut rng),
            tau: 0.5,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            l1: Dense::zeros(dim, HIDDEN),
            l2: Dense::zeros(HIDDEN, HIDDEN),
            l3: Dense::zeros(HIDDEN, 1),
            tau: 0.5,
        }
    }

    /// Rebuilds a head from parameter tensors in [`OodHead::params`] order.
    pub fn from_params(dim: usize, tensors: Vec<Tensor<T>>, tau: f64) -> Result<Self, HeadError> {
        let mut head = Self::zeros(dim);
        head.tau = tau;
        if tensors.len() != 6 {
            return Err(HeadError::DimMismatch {
                expected: 6,
                got: tensors.len(),
            });
        }
        for (slot, t) in head.params_mut().into_iter().zip(tensors) {
            if slot.len() != t.len() {
                return Err(HeadError::DimMismatch {
                    expected: slot.len(),
                    got: t.len(),
                });
            }
            slot.values_mut().copy_from_slice(t.values());
        }
        Ok(head)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.l1.weight,
            &self.l1.bias,
            &self.l2.weight,
            &self.l2.bias,
            &self.l3.weight,
            &self.l3.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.l1.weight,
            &mut self.l1.bias,
            &mut self.l2.weight,
            &mut self.l2.bias,
            &mut self.l3.weight,
            &mut self.l3.bias,
        ]
    }

    /// Final-layer bias.
    pub fn output_bias_mut(&mut self) -> &mut T {
        &mut self.l3.bias.values_mut()[0]
    }

    pub fn cast<U: Scalar>(&self) -> OodHead<U> {
        let cast = |d: &Dense<T>| Dense {
            inputs: d.inputs,
            outputs: d.outputs,
            weight: d.weight.cast(),
            bias: d.bias.cast(),
        };
        OodHead {
            dim: self.dim,
            l1: cast(&self.l1),
            l2: cast(&self.l2),
            l3: cast(&self.l3),
            tau: self.tau,
        }
    }

    fn check(&self, features: &[T]) -> Result<usize, HeadError> {
        if features.len() % self.dim.max(1) != 0 {
            return Err(HeadError::DimMismatch {
                expected: self.dim,
                got: features.len() % self.dim.max(1),
            });
        }
        Ok(features.len() / self.dim.max(1))
    }

    fn trace(&self, features: &[T], batch: usize) -> HeadTrace<T> {
        let mut h1 = self.l1.forward(features, batch);
        relu_forward(&mut h1);
        let mut h2 = self.l2.forward(&h1, batch);
        relu_forward(&mut h2);
        let probs = self.l3.forward(&h2, batch).into_iter().map(sigmoid).collect();
        HeadTrace { h1, h2, probs }
    }

    /// Normal-class probability of one feature vector.
    pub fn head_forward(&self, feature: &[T]) -> Result<T, HeadError> {
        if feature.len() != self.dim {
            return Err(HeadError::DimMismatch {
                expected: self.dim,
                got: feature.len(),
            });
        }
        Ok(self.trace(feature, 1).probs[0])
    }

    /// Probabilities of a row-major batch of feature vectors.
    pub fn predict(&self, features: &[T]) -> Result<Vec<T>, HeadError> {
        let n = self.check(features)?;
        let mut out = Vec::with_capacity(n);
        for chunk in features.chunks(256 * self.dim.max(1)) {
            out.extend(self.trace(chunk, chunk.len() / self.dim).probs);
        }
        Ok(out)
    }

    /// Summed BCE of a batch and its gradient for every parameter tensor.
    /// `targets` holds 1 for normal and 0 for anomalous rows.
    pub fn loss_and_grads(&self, features: &[T], targets: &[T]) -> Result<(f64, Vec<Vec<T>>), HeadError> {
        let batch = self.check(features)?;
        if batch != targets.len() {
            return Err(HeadError::DimMismatch {
                expected: batch,
                got: targets.len(),
            });
        }
        let tr = self.trace(features, batch);
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::from_f64(1.0 - BCE_CLAMP);
        let mut loss = 0.0;
        let dz: Vec<T> = tr
            .probs
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                loss += bce(p.as_f64(), y.as_f64());
                // the clamp is flat outside [δ, 1−δ]
                if p < lo || p > hi {
                    T::zero()
                } else {
                    p - y
                }
            })
            .collect();

        let mut grads: Vec<Vec<T>> = self.params().iter().map(|t| vec![T::zero(); t.len()]).collect();
        let (g1, rest) = grads.split_at_mut(2);
        let (g2, g3) = rest.split_at_mut(2);
        let (g3w, g3b) = g3.split_at_mut(1);
        let dh2 = self.l3.backward(&dz, &tr.h2, batch, &mut g3w[0], &mut g3b[0], true).expect("dx requested");
        let dh2 = relu_backward(&dh2, &tr.h2);
        let (g2w, g2b) = g2.split_at_mut(1);
        let dh1 = self.l2.backward(&dh2, &tr.h1, batch, &mut g2w[0], &mut g2b[0], true).expect("dx requested");
        let dh1 = relu_backward(&dh1, &tr.h1);
        let (g1w, g1b) = g1.split_at_mut(1);
        self.l1.backward(&dh1, features, batch, &mut g1w[0], &mut g1b[0], false);
        Ok((loss, grads))
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }
}

/// `−(y·ln p + (1−y)·ln(1−p))` with `p` clamped to `[δ, 1−δ]`.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `p ≥ τ` is normal.
pub fn classify_ood(p: f64, tau: f64) -> OodDecision {
    if p >= tau {
        OodDecision::Normal
    } else {
        OodDecision::Ood
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    /// Mean BCE over the balanced epoch sample.
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Stage two: fits the head on the frozen features of `main` (normal) and
/// `anomaly` (OOD). The backbone is only borrowed immutably.
pub fn train_head<T: Scalar>(
    backbone: &Backbone<T>,
    head: &mut OodHead<T>,
    main: &LabeledDataset,
    anomaly: &LabeledDataset,
    cfg: &HeadConfig,
) -> Result<Vec<HeadEpoch>, HeadError> {
    if main.is_empty() {
        return Err(HeadError::EmptyDataset("main"));
    }
    if anomaly.is_empty() {
        return Err(HeadError::EmptyDataset("anomaly"));
    }
    let normal = backbone.extract_features(main.images(), main.len())?;
    let ood = backbone.extract_features(anomaly.images(), anomaly.len())?;
    train_head_on_features(head, &normal, &ood, cfg)
}

/// Same as [`train_head`] on precomputed row-major features. Every epoch
/// draws `min(n_normal, n_ood)` rows from each side without replacement.
pub fn train_head_on_features<T: Scalar>(
    head: &mut OodHead<T>,
    normal: &[T],
    ood: &[T],
    cfg: &HeadConfig,
) -> Result<Vec<HeadEpoch>, HeadError> {
    cfg.validate()?;
    let d = head.dim;
    let n_normal = head.check(normal)?;
    let n_ood = head.check(ood)?;
    if n_normal == 0 {
        return Err(HeadError::EmptyDataset("main"));
    }
    if n_ood == 0 {
        return Err(HeadError::EmptyDataset("anomaly"));
    }
    head.tau = cfg.tau;
    let k = n_normal.min(n_ood);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64));
        let mut normal_idx: Vec<usize> = (0..n_normal).collect();
        let mut ood_idx: Vec<usize> = (0..n_ood).collect();
        normal_idx.shuffle(&mut rng);
        ood_idx.shuffle(&mut rng);
        // (source is normal, row)
        let mut picks: Vec<(bool, usize)> = normal_idx[..k]
            .iter()
            .map(|&i| (true, i))
            .chain(ood_idx[..k].iter().map(|&i| (false, i)))
            .collect();
        picks.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut x = Vec::with_capacity(cfg.batch_size * d);
        let mut y = Vec::with_capacity(cfg.batch_size);
        for chunk in picks.chunks(cfg.batch_size) {
            x.clear();
            y.clear();
            for &(is_normal, i) in chunk {
                let src = if is_normal { normal } else { ood };
                x.extend_from_slice(&src[i * d..(i + 1) * d]);
                y.push(if is_normal { T::one() } else { T::zero() });
            }
            let probs = head.trace(&x, chunk.len()).probs;
            correct += probs
                .iter()
                .zip(&y)
                .filter(|(&p, &t)| (classify_ood(p.as_f64(), cfg.tau) == OodDecision::Normal) == (t > T::zero()))
                .count();
            let (loss, mut grads) = head.loss_and_grads(&x, &y)?;
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss {
                    value: loss,
                    context: format!("head epoch {epoch}"),
                }
                .into());
            }
            loss_sum += loss;
            let scale = T::from_f64(1.0 / chunk.len() as f64);
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            opt.step(head.params_mut(), &grads);
        }
        let rec = HeadEpoch {
            epoch,
            loss: loss_sum / (2 * k) as f64,
            accuracy: correct as f64 / (2 * k) as f64,
            samples: 2 * k,
        };
        debug!("head epoch {epoch}: loss {:.5} acc {:.4}", rec.loss, rec.accuracy);
        records.push(rec);
    }
    Ok(records)
}

/// Central-difference check of the summed BCE gradient.
pub fn head_grad_check(
    head: &OodHead<f64>,
    features: &[f64],
    targets: &[f64],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, HeadError> {
    let (_, analytic) = head.loss_and_grads(features, targets)?;
    let loss = |h: &OodHead<f64>| {
        h.loss_and_grads(features, targets)
            .map(|(l, _)| l)
            .unwrap_or(f64::NAN)
    };
    Ok(check_against_central_differences(
        head,
        &analytic,
        cfg,
        |h: &mut OodHead<f64>| h.params_mut(),
        loss,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    /// Plain nested loops, independent of the GEMM path.
    fn reference_forward(head: &OodHead<f64>, x: &[f64]) -> f64 {
        let layer = |d: &Dense<f64>, input: &[f64], relu: bool| -> Vec<f64> {
            let w = d.weight.values();
            (0..d.outputs)
                .map(|o| {
                    let mut s = d.bias.values()[o];
                    for i in 0..d.inputs {
                        s += w[o * d.inputs + i] * input[i];
                    }
                    if relu {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect()
        };
        let h1 = layer(&head.l1, x, true);
        let h2 = layer(&head.l2, &h1, true);
        let z = layer(&head.l3, &h2, false)[0];
        1.0 / (1.0 + (-z).exp())
    }

    fn clouds(n: usize, dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut normal = Vec::new();
        let mut ood = Vec::new();
        for _ in 0..n {
            for j in 0..dim {
                normal.push(if j == 0 { 2.0 } else { 0.0 } + noise.sample(&mut rng));
                ood.push(if j == 0 { -2.0 } else { 0.0 } + noise.sample(&mut rng));
            }
        }
        (normal, ood)
    }

    #[test]
    fn zero_head_gives_one_half() {
        let head = OodHead::<f64>::zeros(5);
        assert_eq!(head.head_forward(&[1.0, -2.0, 3.0, 0.0, 7.0]).unwrap(), 0.5);
    }

    #[test]
    fn huge_output_bias_saturates() {
        let mut head = OodHead::<f64>::new(4, 0);
        *head.output_bias_mut() = 1e6;
        let p = head.head_forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(p > 1.0 - 1e-12);
        *head.output_bias_mut() = -1e6;
        let p = head.head_forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(p < 1e-12 && p >= 0.0);
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let head = OodHead::<f32>::zeros(3);
        assert_eq!(
            head.head_forward(&[1.0, 2.0]),
            Err(HeadError::DimMismatch { expected: 3, got: 2 })
        );
    }

    #[test]
    fn seed_zero_golden_value() {
        let head = OodHead::<f64>::new(8, 0);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = head.head_forward(&x).unwrap();
        let want = reference_forward(&head, &x);
        assert!((p - want).abs() < 1e-14, "{p} vs {want}");
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn bce_values() {
        assert!((bce(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(0.731058, 1.0) - 0.313262).abs() < 1e-6);
        assert!(bce(1.0, 1.0) < 1e-6);
        assert!(bce(0.0, 1.0).is_finite());
    }

    #[test]
    fn decision_rule() {
        assert_eq!(classify_ood(0.9, 0.5), OodDecision::Normal);
        assert_eq!(classify_ood(0.1, 0.5), OodDecision::Ood);
        assert_eq!(classify_ood(0.5, 0.5), OodDecision::Normal);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let head = OodHead::<f64>::new(6, 3);
        let (normal, ood) = clouds(4, 6, 1);
        let x: Vec<f64> = normal.iter().chain(&ood).copied().collect();
        let y = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let report = head_grad_check(&head, &x, &y, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
        assert!(report.checked > 40);

        let faulty = GradCheckConfig {
            gradient_scale: 1.1,
            ..Default::default()
        };
        assert!(head_grad_check(&head, &x, &y, &faulty).unwrap().max_rel_error > 1e-2);
    }

    #[test]
    fn separable_clouds_are_learned() {
        let (normal, ood) = clouds(200, 4, 7);
        let mut head = OodHead::<f64>::new(4, 0);
        let cfg = HeadConfig {
            epochs: 20,
            ..Default::default()
        };
        let trace = train_head_on_features(&mut head, &normal, &ood[..150 * 4], &cfg).unwrap();
        assert_eq!(trace.len(), 20);
        assert_eq!(trace[0].samples, 300);
        let probs_n = head.predict(&normal).unwrap();
        let probs_o = head.predict(&ood).unwrap();
        let right = probs_n.iter().filter(|&&p| p >= 0.5).count() + probs_o.iter().filter(|&&p| p < 0.5).count();
        assert!(right as f64 / 400.0 >= 0.99, "accuracy {}", right as f64 / 400.0);
    }

    #[test]
    fn zero_learning_rate_leaves_head_unchanged() {
        let (normal, ood) = clouds(20, 3, 2);
        let mut head = OodHead::<f64>::new(3, 5);
        let before = head.clone();
        let cfg = HeadConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        train_head_on_features(&mut head, &normal, &ood, &cfg).unwrap();
        assert_eq!(head, before);
    }

    #[test]
    fn empty_sources_are_rejected() {
        let mut head = OodHead::<f64>::new(2, 0);
        let cfg = HeadConfig::default();
        assert_eq!(
            train_head_on_features(&mut head, &[], &[1.0, 2.0], &cfg),
            Err(HeadError::EmptyDataset("main"))
        );
        assert_eq!(
            train_head_on_features(&mut head, &[1.0, 2.0], &[], &cfg),
            Err(HeadError::EmptyDataset("anomaly"))
        );
    }

    #[test]
    fn backbone_is_untouched_by_stage_two() {
        use crate::data::{synth_blobs, Role};
        use crate::nn::FeatureTap;
        let main = synth_blobs(2, 10, 12, 3.0, 0);
        let anomaly = synth_blobs(2, 5, 12, 0.5, 9).with_role(Role::Anomaly);
        let backbone = Backbone::<f32>::lenet(12, 2, FeatureTap::PostRelu, 4).unwrap();
        let before = backbone.clone();
        let mut head = OodHead::new(backbone.feature_dim(), 1);
        train_head(&backbone, &mut head, &main, &anomaly, &HeadConfig::default()).unwrap();
        assert_eq!(backbone, before);
        let empty = anomaly.take(0);
        assert_eq!(
            train_head(&backbone, &mut head, &main, &empty, &HeadConfig::default()),
            Err(HeadError::EmptyDataset("anomaly"))
        );
    }

    #[test]
    fn params_round_trip() {
        let head = OodHead::<f32>::new(5, 11);
        let tensors: Vec<Tensor<f32>> = head.params().into_iter().cloned().collect();
        let rebuilt = OodHead::from_params(5, tensors, 0.5).unwrap();
        assert_eq!(rebuilt, head);
    }

    proptest::proptest! {
        #[test]
        fn monotone_in_output_bias(
            x in proptest::collection::vec(-3.0f64..3.0, 4),
            b in -20.0f64..20.0,
            step in 0.0f64..5.0,
        ) {
            let mut head = OodHead::<f64>::new(4, 2);
            *head.output_bias_mut() = b;
            let p0 = head.head_forward(&x).unwrap();
            *head.output_bias_mut() = b + step;
            let p1 = head.head_forward(&x).unwrap();
            proptest::prop_assert!(p1 >= p0);
            proptest::prop_assert!(p0 > 0.0 && p0 < 1.0);
        }

        #[test]
        fn bce_is_non_negative(p in 0.0f64..=1.0, y in proptest::bool::ANY) {
            let target = if y { 1.0 } else { 0.0 };
            proptest::prop_assert!(bce(p, target) >= 0.0);
        }
    }
}
