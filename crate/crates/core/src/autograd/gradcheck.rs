use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over every checked scalar of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// Input and flat element index where the max occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences `(f(x + ε) − f(x − ε)) / 2ε`, element by element.
///
/// `f` receives a fresh tape and one gradient-requiring leaf per input and
/// must return a scalar. It is re-run twice per element, so it must be
/// deterministic.
pub fn gradient_check<F>(inputs: &[Tensor<f64>], f: F, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Usage("gradient_check needs a scalar-valued function".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| alloc::vec![0.0; t.numel()]))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[ii].data_mut()[j] = orig + epsilon;
            let plus = eval(&work)?;
            work[ii].data_mut()[j] = orig - epsilon;
            let minus = eval(&work)?;
            work[ii].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (analytic[ii][j] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (ii, j);
            }
        }
    }
    Ok(report)
}
