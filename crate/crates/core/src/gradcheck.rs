//! Central finite-difference gradient checking.

use crate::error::TensorError;
use crate::tensor::{TResult, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` among
    /// entries above the absolute floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Compares `backward()` gradients of the scalar `f(inputs)` with central
/// differences over every entry of every input. Inputs must be parameters
/// (`requires_grad`); their values are restored afterwards.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> TResult<GradCheckReport>
where
    F: Fn(&[Tensor]) -> TResult<Tensor>,
{
    if let Some(bad) = inputs.iter().find(|t| !t.requires_grad()) {
        return Err(TensorError::Invalid(format!(
            "gradient check input {:?} does not require grad",
            bad.shape()
        )));
    }
    inputs.iter().for_each(Tensor::zero_grad);
    f(inputs)?.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for (t, grad) in inputs.iter().zip(&analytic) {
        for i in 0..t.numel() {
            let orig = t.value()[i];
            t.update_value(|v| v[i] = orig + cfg.step);
            let plus = f(inputs)?.item();
            t.update_value(|v| v[i] = orig - cfg.step);
            let minus = f(inputs)?.item();
            t.update_value(|v| v[i] = orig);
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad[i];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs > cfg.abs_tol {
                report.max_rel_error = report.max_rel_error.max(abs / scale);
            }
            if !a.is_finite() || abs > cfg.abs_tol.max(cfg.rel_tol * scale) {
                report.failures += 1;
            }
        }
    }
    inputs.iter().for_each(Tensor::zero_grad);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::param(vec![0.5, -1.0], &[2]).unwrap();
        // straight-through with a fixed forward: backward claims slope 1, true slope 0
        let bogus = |ins: &[Tensor]| Ok(ins[0].straight_through(vec![1.0, 1.0])?.sum());
        let r = check_gradients(bogus, &[x.clone()], GradCheckConfig::default()).unwrap();
        assert_eq!(r.failures, 2);
        let good = |ins: &[Tensor]| Ok(ins[0].exp().sum());
        assert!(check_gradients(good, &[x], GradCheckConfig::default())
            .unwrap()
            .passed());
    }
}
