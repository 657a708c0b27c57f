//! Central-difference verification of analytic gradients (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::batch_gradients;
use super::{Backbone, NnError, Tensor};
use crate::centerloss::Centers;
use crate::data::MiniBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all of them if the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
    pub lambda: f64,
    /// Multiplier applied to the analytic gradient before comparison; 1.0
    /// for a real check, anything else injects a fault.
    pub gradient_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_tensor: 12,
            seed: 0,
            lambda: 0.0,
            gradient_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` (one gradient buffer per tensor returned by `params`)
/// against `(f(w+ε) − f(w−ε)) / 2ε` on a seeded random subset of coordinates.
pub fn check_against_central_differences<M, P, F>(
    model: &M,
    analytic: &[Vec<f64>],
    cfg: &GradCheckConfig,
    params: P,
    loss: F,
) -> GradCheckReport
where
    M: Clone,
    P: Fn(&mut M) -> Vec<&mut Tensor<f64>>,
    F: Fn(&M) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = model.clone();
    let sizes: Vec<usize> = params(&mut probe).iter().map(|t| t.len()).collect();
    assert_eq!(sizes.len(), analytic.len(), "one analytic buffer per tensor");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    for (t, &size) in sizes.iter().enumerate() {
        let picks: Vec<usize> = if size <= cfg.samples_per_tensor {
            (0..size).collect()
        } else {
            (0..cfg.samples_per_tensor).map(|_| rng.random_range(0..size)).collect()
        };
        for i in picks {
            let orig = params(&mut probe)[t].values()[i];
            params(&mut probe)[t].values_mut()[i] = orig + cfg.eps;
            let up = loss(&probe);
            params(&mut probe)[t].values_mut()[i] = orig - cfg.eps;
            let down = loss(&probe);
            params(&mut probe)[t].values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let err = relative_error(analytic[t][i] * cfg.gradient_scale, numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    report
}

/// Checks the gradient of `L_S + λ·L_C` (batch sum) for the backbone.
pub fn grad_check(
    model: &Backbone<f64>,
    centers: &Centers<f64>,
    batch: &MiniBatch,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NnError> {
    let (_, analytic, _) = batch_gradients(model, centers, batch, cfg.lambda)?;
    let loss = |m: &Backbone<f64>| {
        batch_gradients(m, centers, batch, cfg.lambda)
            .map(|(l, _, _)| l.total)
            .unwrap_or(f64::NAN)
    };
    Ok(check_against_central_differences(
        model,
        &analytic,
        cfg,
        |m: &mut Backbone<f64>| m.params_mut(),
        loss,
    ))
}
