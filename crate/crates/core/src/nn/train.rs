//! Stage-one training: softmax cross-entropy plus λ-weighted center loss.

use log::debug;
use serde::{Deserialize, Serialize};

use super::loss::{argmax_rows, softmax_xent};
use super::optim::Sgd;
use super::{Backbone, NnError, Scalar};
use crate::centerloss::{center_loss, center_loss_grads, combine, Centers};
use crate::data::{make_batches, LabeledDataset, MiniBatch, Role};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_learning_rate() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    64
}
fn default_epochs() -> usize {
    3
}
fn default_center_rate() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Balancing coefficient of the center loss.
    #[serde(default)]
    pub lambda: f64,
    /// Centroid update rate α.
    #[serde(default = "default_center_rate")]
    pub center_rate: f64,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            lambda: 0.0,
            center_rate: default_center_rate(),
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: &str| Err(NnError::InvalidConfig(msg.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite value >= 0");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be a finite value >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.center_rate > 0.0 && self.center_rate <= 1.0) {
            return bad("center update rate must lie in (0, 1]");
        }
        Ok(())
    }

    /// Shuffle seed of a given epoch.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Loss terms of one batch (sums over the batch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub softmax: f64,
    pub center: f64,
    pub correct: usize,
}

/// Combined loss `L_S + λ·L_C` of a batch and the analytic gradient of that
/// sum with respect to every backbone parameter. Centroid deltas are returned
/// when `λ > 0`.
pub fn batch_gradients<T: Scalar>(
    backbone: &Backbone<T>,
    centers: &Centers<T>,
    batch: &MiniBatch,
    lambda: f64,
) -> Result<(BatchLoss, Vec<Vec<T>>, Option<Vec<T>>), NnError> {
    let trace = backbone.forward_train(batch)?;
    let classes = backbone.n_classes();
    let (ls, dlogits) = softmax_xent(&trace.logits, &batch.labels, classes)?;
    let correct = argmax_rows(&trace.logits, classes)
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();

    let (lc, dfeatures, deltas) = if lambda > 0.0 {
        let lc = center_loss(&trace.features, &batch.labels, centers)?;
        let (mut g, deltas) = center_loss_grads(&trace.features, &batch.labels, centers)?;
        let lam = T::from_f64(lambda);
        for v in &mut g {
            *v *= lam;
        }
        (lc, Some(g), Some(deltas))
    } else {
        (T::zero(), None, None)
    };
    let total = combine(ls, lc, lambda);
    let grads = backbone.backward(&trace, &dlogits, dfeatures.as_deref());
    Ok((
        BatchLoss {
            total: total.as_f64(),
            softmax: ls.as_f64(),
            center: lc.as_f64(),
            correct,
        },
        grads,
        deltas,
    ))
}

/// Loss and accuracy summary of one epoch (per-sample means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub softmax_loss: f64,
    pub center_loss: f64,
    pub accuracy: f64,
}

/// Owns the backbone, the centroids and the optimizer state during stage one.
pub struct Trainer<T> {
    pub backbone: Backbone<T>,
    pub centers: Centers<T>,
    cfg: TrainConfig,
    optimizer: Sgd<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(backbone: Backbone<T>, centers: Centers<T>, cfg: TrainConfig) -> Result<Self, NnError> {
        cfg.validate()?;
        if centers.classes() != backbone.n_classes() || centers.dim() != backbone.feature_dim() {
            return Err(NnError::InvalidConfig(format!(
                "centers are {}×{} but the backbone has {} classes and {}-dimensional features",
                centers.classes(),
                centers.dim(),
                backbone.n_classes(),
                backbone.feature_dim()
            )));
        }
        let optimizer = Sgd::new(cfg.learning_rate, cfg.momentum);
        Ok(Self {
            backbone,
            centers,
            cfg,
            optimizer,
        })
    }

    /// Fresh LeNet backbone and centroids seeded from `cfg.seed`.
    pub fn lenet(side: usize, classes: usize, tap: super::FeatureTap, cfg: TrainConfig) -> Result<Self, NnError> {
        let backbone = Backbone::lenet(side, classes, tap, cfg.seed)?;
        let centers = Centers::random(
            classes,
            backbone.feature_dim(),
            cfg.center_rate,
            cfg.lambda,
            cfg.seed.wrapping_add(1),
        );
        Self::new(backbone, centers, cfg)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One gradient step on the batch-mean of `L_S + λ·L_C`, followed by the
    /// centroid update when `λ > 0`.
    pub fn step(&mut self, batch: &MiniBatch) -> Result<BatchLoss, NnError> {
        let (loss, mut grads, deltas) = batch_gradients(&self.backbone, &self.centers, batch, self.cfg.lambda)?;
        if !loss.total.is_finite() {
            return Err(NnError::NonFiniteLoss {
                value: loss.total,
                context: format!("softmax {} center {}", loss.softmax, loss.center),
            });
        }
        let scale = T::from_f64(1.0 / batch.len() as f64);
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
        self.optimizer.step(self.backbone.params_mut(), &grads);
        if let Some(deltas) = deltas {
            self.centers.apply_deltas(&deltas);
        }
        Ok(loss)
    }

    pub fn train_epoch(&mut self, ds: &LabeledDataset, epoch: usize) -> Result<EpochRecord, NnError> {
        if ds.role() != Role::MainTrain {
            return Err(NnError::WrongRole(ds.role()));
        }
        let mut sums = (0.0, 0.0, 0.0, 0usize);
        for (i, batch) in make_batches(ds, self.cfg.batch_size, self.cfg.epoch_seed(epoch), true).enumerate() {
            let loss = self.step(&batch).map_err(|e| match e {
                NnError::NonFiniteLoss { value, context } => NnError::NonFiniteLoss {
                    value,
                    context: format!("epoch {epoch}, batch {i}: {context}"),
                },
                other => other,
            })?;
            sums.0 += loss.total;
            sums.1 += loss.softmax;
            sums.2 += loss.center;
            sums.3 += loss.correct;
            if i % 200 == 0 {
                debug!("epoch {epoch} batch {i}: loss {:.4}", loss.total / batch.len() as f64);
            }
        }
        let n = ds.len().max(1) as f64;
        Ok(EpochRecord {
            epoch,
            loss: sums.0 / n,
            softmax_loss: sums.1 / n,
            center_loss: sums.2 / n,
            accuracy: sums.3 as f64 / n,
        })
    }

    pub fn fit(&mut self, ds: &LabeledDataset) -> Result<Vec<EpochRecord>, NnError> {
        (0..self.cfg.epochs).map(|e| self.train_epoch(ds, e)).collect()
    }

    pub fn into_parts(self) -> (Backbone<T>, Centers<T>) {
        (self.backbone, self.centers)
    }
}
