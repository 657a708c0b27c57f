//! Numerical substrate and the LeNet backbone, with hand-written backprop.

mod backbone;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
mod scalar;
mod tensor;
pub mod train;

use thiserror::Error;

pub use backbone::{ArchSpec, Backbone, FeatureTap, ForwardTrace};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{Dense, LayerSpec};
pub use loss::{argmax_rows, softmax, softmax_xent};
pub use optim::Sgd;
pub use scalar::{matmul, Scalar};
pub use tensor::Tensor;
pub use train::{batch_gradients, BatchLoss, EpochRecord, Precision, TrainConfig, Trainer};

use crate::centerloss::CenterLossError;
use crate::data::Role;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss {value} ({context})")]
    NonFiniteLoss { value: f64, context: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("classifier training needs a main-train dataset, got {0:?}")]
    WrongRole(Role),
    #[error(transparent)]
    CenterLoss(#[from] CenterLossError),
}
