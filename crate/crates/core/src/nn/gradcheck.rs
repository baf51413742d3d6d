//! Central finite-difference gradient checking.

use ndarray::ArrayView2;

use super::model::{ClnModel, Mode, Params};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_error: f64,
    /// `name[index]` of the worst entry.
    pub worst_param: String,
    pub passed: bool,
}

/// Compares `grad` against central differences of the train-mode loss with
/// the dropout mask fixed by `seed`. Relative error per entry is
/// `|a − fd| / max(1, |a|)`; `tolerance` must be positive.
pub fn check_with(
    model: &ClnModel,
    image: ArrayView2<f64>,
    label: usize,
    seed: u64,
    grad: &Params,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut probe = model.clone();
    let names: Vec<String> = model.params.tensors().iter().map(|t| t.name.clone()).collect();
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.data.to_vec()).collect();
    if analytic.len() != names.len()
        || analytic.iter().zip(model.params.tensors()).any(|(a, t)| a.len() != t.data.len())
    {
        return Err(Error::invalid("gradient does not match the parameter layout"));
    }
    let mut report = GradCheckReport { checked: 0, worst_error: 0.0, worst_param: String::new(), passed: false };
    for (t, name) in names.iter().enumerate() {
        for j in 0..analytic[t].len() {
            let orig = probe.params.tensors_mut()[t][j];
            probe.params.tensors_mut()[t][j] = orig + FD_STEP;
            let plus = probe.loss(image, label, Mode::Train { seed })?;
            probe.params.tensors_mut()[t][j] = orig - FD_STEP;
            let minus = probe.loss(image, label, Mode::Train { seed })?;
            probe.params.tensors_mut()[t][j] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[t][j];
            let err = (a - fd).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("{name}[{j}]")));
            }
            report.checked += 1;
            if err > report.worst_error || report.worst_param.is_empty() {
                report.worst_error = err;
                report.worst_param = format!("{name}[{j}]");
            }
        }
    }
    report.passed = tolerance > 0.0 && report.worst_error <= tolerance;
    Ok(report)
}

/// Checks the model's own backward pass.
pub fn check(model: &ClnModel, image: ArrayView2<f64>, label: usize, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let (_, grad) = model.loss_and_grad(image, label, seed)?;
    check_with(model, image, label, seed, &grad, tolerance)
}
