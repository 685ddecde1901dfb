//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor so that near-zero gradients are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against `(f(x+hᵢeᵢ) − f(x−hᵢeᵢ)) / 2hᵢ` with
/// `hᵢ = step·max(1, |xᵢ|)`.
pub fn compare_gradient<F>(
    mut f: F,
    analytic: &Tensor,
    x: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "analytic gradient {:?} does not match input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let xi = x.data()[i];
        let h = step * xi.abs().max(1.0);
        probe.data_mut()[i] = xi + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = xi - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = xi;
        let n = (up - down) / (2.0 * h);
        numeric.data_mut()[i] = n;
        let err = relative_error(analytic.data()[i], n);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic: analytic.clone(),
        numeric,
        tolerance: tol,
        passed: max_rel_error < tol,
    })
}

/// Builds `f` on a tape, differentiates it with respect to `x`, and checks
/// the result against central differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.take(xv);
    compare_gradient(
        |probe| {
            let mut tape = Tape::new();
            let xv = tape.constant(probe.clone());
            let out = f(&mut tape, xv)?;
            tape.value(out).item()
        },
        &analytic,
        x,
        step,
        tol,
    )
}
