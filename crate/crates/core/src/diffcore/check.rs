//! Central finite-difference gradient checking.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of every pullback rule it is used to audit.

use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the elementwise relative error, so that gradients
/// that are numerically zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Central differences of a scalar function with respect to every input element.
pub fn finite_difference<F>(mut f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for k in 0..inputs[t].numel() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let fp = f(&work)?;
            work[t].data_mut()[k] = orig - h;
            let fm = f(&work)?;
            work[t].data_mut()[k] = orig;
            g.data_mut()[k] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest `|a - n| / max(|a|, |n|, REL_FLOOR)` over all elements.
pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> (f64, (usize, usize)) {
    let mut worst = (0.0, (0, 0));
    for (t, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (k, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let denom = x.abs().max(y.abs()).max(REL_FLOOR);
            let e = (x - y).abs() / denom;
            if !(e <= worst.0) {
                worst = (e, (t, k));
            }
        }
    }
    worst
}

/// Compares tape gradients of `build` against central finite differences.
pub fn check_gradients<F>(build: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let numeric = finite_difference(
        |xs| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let loss = build(&mut tape, &vars)?;
            tape.value(loss).item().ok_or(Error::NonScalarLoss {
                numel: tape.value(loss).numel(),
            })
        },
        inputs,
        FD_STEP,
    )?;
    let (max_rel_error, worst) = relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
