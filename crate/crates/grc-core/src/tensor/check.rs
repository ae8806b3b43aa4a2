//! Central finite-difference verification of analytic gradients.

use super::{DiffTensor, Tape};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with a floor so near-zero gradient pairs compare sanely.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences at `x0`.
///
/// `f` must be deterministic: it is evaluated twice on fresh tapes and the two
/// values must agree bit-for-bit, otherwise a determinism error is returned
/// (finite differences of a noisy function are meaningless).
pub fn gradient_check<F>(
    f: F,
    x0: &[f64],
    shape: &[usize],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &DiffTensor) -> Result<DiffTensor>,
{
    let eval = |data: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(data.to_vec(), shape)?;
        let y = f(&tape, &x)?;
        if y.numel() != 1 {
            return Err(Error::Dimension {
                op: "gradient_check",
                msg: format!("function output must be scalar, got {:?}", y.shape()),
            });
        }
        Ok(y.item())
    };

    let y0 = eval(x0)?;
    let y1 = eval(x0)?;
    if y0.to_bits() != y1.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations differ: {y0} vs {y1}"
        )));
    }

    // Analytic pass.
    let tape = Tape::new();
    let x = tape.leaf(x0.to_vec(), shape)?;
    let y = f(&tape, &x)?;
    y.backward()?;
    let analytic = x.grad();

    let mut numeric = vec![0.0; x0.len()];
    let mut errs = vec![0.0; x0.len()];
    let mut max_err = 0.0f64;
    let mut perturbed = x0.to_vec();
    for i in 0..x0.len() {
        let orig = perturbed[i];
        perturbed[i] = orig + step;
        let yp = eval(&perturbed)?;
        perturbed[i] = orig - step;
        let ym = eval(&perturbed)?;
        perturbed[i] = orig;
        numeric[i] = (yp - ym) / (2.0 * step);
        errs[i] = rel_err(analytic[i], numeric[i]);
        max_err = max_err.max(errs[i]);
    }

    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_err: errs,
        max_rel_err: max_err,
        tol,
        passed: max_err < tol,
    })
}
