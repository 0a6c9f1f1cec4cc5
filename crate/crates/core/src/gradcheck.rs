//! Central finite-difference gradient checker.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::real::Real;

/// A named contiguous range inside the flat parameter vector; errors are
/// reported per slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn new(name: impl Into<String>, offset: usize, len: usize) -> Self {
        ParamSlot {
            name: name.into(),
            offset,
            len,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlotError {
    pub name: String,
    pub max_rel_error: f64,
    /// Index (within the slot) of the worst element.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub slots: Vec<SlotError>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(θ+ε) - f(θ-ε)) / 2ε` for every element
/// of `theta`. `theta` is restored before returning. The loss may be
/// evaluated in a wider type than `f64`; the difference is taken in that
/// type, and the divisor is the step actually representable around `θ`.
pub fn gradient_check<F, L>(
    mut loss_fn: F,
    theta: &mut [f64],
    analytic: &[f64],
    slots: &[ParamSlot],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<L>,
    L: Real,
{
    if analytic.len() != theta.len() {
        return Err(Error::Shape(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let base = loss_fn(theta)?.to_f64();
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss(base));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        slots: Vec::with_capacity(slots.len()),
        checked: 0,
    };
    for slot in slots {
        let mut se = SlotError {
            name: slot.name.clone(),
            max_rel_error: 0.0,
            worst: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..slot.len {
            let idx = slot.offset + k;
            let orig = theta[idx];
            let (up, down) = (orig + eps, orig - eps);
            theta[idx] = up;
            let plus = loss_fn(theta);
            theta[idx] = down;
            let minus = loss_fn(theta);
            theta[idx] = orig;
            let (plus, minus) = (plus?, minus?);
            let (pf, mf) = (plus.to_f64(), minus.to_f64());
            if !pf.is_finite() || !mf.is_finite() {
                return Err(Error::NonFiniteLoss(if pf.is_finite() { mf } else { pf }));
            }
            let numeric = (plus - minus).to_f64() / (up - down);
            let err = relative_error(analytic[idx], numeric);
            if err > se.max_rel_error || k == 0 {
                se.max_rel_error = err;
                se.worst = k;
                se.analytic = analytic[idx];
                se.numeric = numeric;
            }
            report.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(se.max_rel_error);
        report.slots.push(se);
    }
    Ok(report)
}
