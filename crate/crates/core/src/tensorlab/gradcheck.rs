//! Central finite-difference checks of analytic gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// A scalar function of several tensors with an analytic gradient.
pub trait Differentiable {
    fn value(&self, inputs: &[Tensor]) -> Result<f64>;
    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Adapts a tape-building closure: every input becomes a tracked leaf and the
/// closure must return a scalar node.
pub struct TapeFn<F>(pub F);

impl<F> TapeFn<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn run(&self, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = (self.0)(&mut tape, &vars)?;
        Ok((tape, vars, out))
    }
}

impl<F> Differentiable for TapeFn<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        let (tape, _, out) = self.run(inputs)?;
        Ok(tape.value(out).item())
    }

    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let (tape, vars, out) = self.run(inputs)?;
        let grads = tape.backward(out)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `op.gradient` with central differences at every input element.
pub fn grad_check(
    op: &impl Differentiable,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps {eps} outside (0, 1e-2]")));
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("grad_check inputs"));
    }
    let analytic = op.gradient(inputs)?;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance: tol,
        passed: true,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..inputs[ti].len() {
            let x0 = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = x0 + eps;
            let up = op.value(&probe)?;
            probe[ti].data_mut()[ei] = x0 - eps;
            let down = op.value(&probe)?;
            probe[ti].data_mut()[ei] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
