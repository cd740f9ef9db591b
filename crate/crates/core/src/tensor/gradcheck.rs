//! Central finite-difference checks for graph gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Finite-difference step used throughout.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let up = f(&probe);
    probe[i] = x[i] - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Worst elementwise discrepancy found for one input.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares backward-pass gradients of a scalar function of `inputs`
/// against central differences, for every element of every input.
pub fn check<F>(inputs: &[Tensor], build: F, h: f64) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = if g.value(out).numel() == 1 { out } else { g.sum(out) };
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).expect("leaf").data().to_vec()).collect();

    let eval = |which: usize, values: &[f64]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let t = if k == which {
                    Tensor::new(t.shape().to_vec(), values.to_vec()).expect("shape")
                } else {
                    t.clone()
                };
                g.constant(t)
            })
            .collect();
        let out = build(&mut g, &vars).expect("forward succeeded once");
        g.data(out).iter().sum()
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut report = InputCheck {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..input.numel() {
            let numeric = central_difference(|v| eval(k, v), input.data(), i, h);
            let err = relative_error(analytic[k][i], numeric);
            if err > report.max_rel_err || i == 0 {
                report = InputCheck {
                    max_rel_err: err,
                    worst_index: i,
                    analytic: analytic[k][i],
                    numeric,
                };
            }
        }
        reports.push(report);
    }
    Ok(reports)
}
