use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively. Difference quotients of O(100) losses carry roundoff near
/// 1e-10, so smaller gradients have no meaningful relative error at 1e-4.
const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// (input index, flat element index) of the largest relative error.
    pub worst: Option<(usize, usize)>,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` rebuilds the computation on a fresh tape from leaf variables, one per
/// entry of `inputs`. Every element of every input is perturbed.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::Usage(format!(
            "finite-difference step {step} outside [1e-6, 1e-4]"
        )));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        step,
        tolerance,
        passed: true,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        if !analytic.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for input {k}")));
        }
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            let mut at = |offset: f64| -> Result<f64> {
                work[k].data_mut()[e] = orig + offset;
                eval(&work)
            };
            // five-point central stencil, truncation error O(step⁴)
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            work[k].data_mut()[e] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((k, e));
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
