use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cnn::CnnModel;
use super::ModelInput;
use crate::error::Result;

/// Gradients smaller than this in both estimates compare in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameters skipped because ±eps crossed a ReLU kink.
    pub skipped: usize,
    /// Largest analytic gradient magnitude among checked parameters.
    pub max_abs_grad: f64,
}

/// Compares the backward pass to central differences of the per-sample
/// loss on `n_params` randomly chosen parameters.
///
/// A parameter whose perturbation flips any ReLU is skipped and replaced by
/// another draw, since the loss is not differentiable across the kink.
pub fn grad_check(
    model: &CnnModel<f64>,
    input: &ModelInput<f64>,
    target_ms: &[f64],
    eps: f64,
    n_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    model.config.shape.check(&input.shape)?;
    input.check()?;
    let mut ws = model.workspace();
    let mut analytic = vec![0.0; model.param_count()];
    model.loss_and_grad(&input.rh, &input.lh, &input.rc, target_ms, 1.0, &mut ws, &mut analytic);

    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, model.param_count(), model.param_count());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        max_abs_grad: 0.0,
    };
    for i in order {
        if report.checked >= n_params {
            break;
        }
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let plus = probe.loss(&input.rh, &input.lh, &input.rc, target_ms, &mut ws);
        let sig_plus = ws.relu_signature();
        probe.params[i] = orig - eps;
        let minus = probe.loss(&input.rh, &input.lh, &input.rc, target_ms, &mut ws);
        let sig_minus = ws.relu_signature();
        probe.params[i] = orig;
        if sig_plus != sig_minus {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.max_abs_grad = report.max_abs_grad.max(a.abs());
        report.checked += 1;
    }
    Ok(report)
}
