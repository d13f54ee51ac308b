//! Central finite differences against the analytic gradient, per tensor.

use serde::{Deserialize, Serialize};

use super::{batch_loss, Batch, Model};
use crate::alignment::ObjectiveOptions;
use crate::encoders::params::Params;
use crate::Result;

/// Fourth-order central stencil. The plain two-point rule at any single
/// step size is either truncation-bound on the small-scale embedding tables
/// or rounding-bound on near-zero gradients.
const STEP: f64 = 1e-4;
/// Denominator floor: below this magnitude both gradients count as zero
/// and are compared in absolute terms.
const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Tensors at or above the tolerance.
    pub failing: Vec<String>,
}

/// Compare `analytic` with central differences of `loss` at `params`,
/// entry by entry, reporting the worst `|a−n| / max(|a|, |n|, 1e-5)` per
/// tensor.
pub fn compare_gradients<P: Params>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> Result<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let flat = params.flatten();
    let grad = analytic.flatten();
    let mut probe = params.clone();
    let mut work = flat.clone();
    let mut tensors = Vec::new();
    let mut at = 0;
    for (name, _, len) in params.layout() {
        let mut worst = (0.0f64, 0);
        for k in 0..len {
            let i = at + k;
            let mut at_offset = |o: f64| -> Result<f64> {
                work[i] = flat[i] + o * STEP;
                probe.assign_flat(&work);
                loss(&probe)
            };
            let (p1, m1) = (at_offset(1.0)?, at_offset(-1.0)?);
            let (p2, m2) = (at_offset(2.0)?, at_offset(-2.0)?);
            work[i] = flat[i];
            let num = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * STEP);
            let err = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(FLOOR);
            if err > worst.0 || err.is_nan() {
                worst = (err, k);
            }
        }
        tensors.push(TensorCheck {
            name,
            len,
            max_rel_err: worst.0,
            worst_index: worst.1,
        });
        at += len;
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<String> = tensors
        .iter()
        .filter(|t| !(t.max_rel_err < tolerance))
        .map(|t| t.name.clone())
        .collect();
    Ok(GradCheckReport {
        passed: failing.is_empty(),
        tensors,
        max_rel_err,
        tolerance,
        failing,
    })
}

/// Check the gradient of the total loss on one batch.
///
/// Stop-gradient on the similarity targets is switched off for the check:
/// with it on, the update direction is deliberately not the gradient of the
/// loss being differenced.
pub fn grad_check(model: &Model, batch: &Batch, opts: &ObjectiveOptions, tolerance: f64) -> Result<GradCheckReport> {
    let opts = ObjectiveOptions {
        stop_grad_targets: false,
        ..*opts
    };
    let (_, grads) = batch_loss(model, batch, &opts, true)?;
    let grads = grads.expect("gradients requested");
    compare_gradients(model, &grads, |m| Ok(batch_loss(m, batch, &opts, false)?.0.total), tolerance)
}
