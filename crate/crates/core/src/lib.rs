//! Out-of-distribution detection on top of a small image classifier.
//!
//! A modified LeNet is trained with softmax cross-entropy plus a weighted
//! center loss, which pulls the deep features of every class towards a learned
//! centroid. The trained trunk then serves two detectors:
//!
//! - [`detector`]: per-class Gaussian fits over the deep features, Mahalanobis
//!   distances and percentile thresholds. A sample is normal when it falls
//!   inside the threshold of at least one class. Needs only in-distribution data.
//! - [`head`]: a 256-256-1 perceptron on the frozen deep features, trained with
//!   binary cross-entropy against an anomaly dataset.
//!
//! [`evalkit`] holds the metrics (F1, ROC/AUC, PCA projection) and [`cli`] the
//! configuration, archive format and experiment driver behind the `oodnet`
//! binary.

pub mod centerloss;
pub mod cli;
pub mod data;
pub mod detector;
pub mod evalkit;
pub mod head;
pub mod nn;

pub use centerloss::Centers;
pub use data::{LabeledDataset, MiniBatch, Role};
pub use detector::{ClassStats, DetectorModel};
pub use head::OodHead;
pub use nn::{Backbone, Scalar, TrainConfig};
