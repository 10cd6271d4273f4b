//! Central finite-difference oracle for tape gradients (64-bit only).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric values at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Entries whose ±h stencil crosses a relu/max branch, or that sit on one.
    pub excluded: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`. The floor keeps round-off in the
/// stencil (about 1e-12 here) from dominating entries whose true value is 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn record<F>(f: &F, params: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var, f64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(format!("p{i}"), p.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out)?;
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "check_gradients" });
    }
    Ok((tape, vars, out, v))
}

/// Compares tape gradients of the scalar `f` against the five-point
/// central difference with step `h`. Entries whose stencil changes any relu mask or max
/// winner are excluded (non-differentiable points).
pub fn check_gradients<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    let (tape, vars, loss, _) = record(&f, params)?;
    let (base_sig, _) = tape.branch_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let probe = |work: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let (tape, _, _, v) = record(&f, work)?;
        Ok((v, tape.branch_signature().0))
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
        excluded: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            let mut values = [0.0; 4];
            let mut crosses = false;
            for (v, offset) in values.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                work[pi].data_mut()[j] = orig + offset * h;
                let (value, sig) = probe(&work)?;
                *v = value;
                crosses |= sig != base_sig;
            }
            work[pi].data_mut()[j] = orig;
            if crosses {
                report.excluded += 1;
                continue;
            }
            let [p2, p1, m1, m2] = values;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let err = relative_error(grad.data()[j], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, j));
                report.worst_values = (grad.data()[j], numeric);
            }
        }
    }
    Ok(report)
}
