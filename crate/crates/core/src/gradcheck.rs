//! Central finite-difference verification of tape gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Graph, Result, Tensor, Var};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over every input element.
    pub max_rel_error: f64,
    /// `(input, flat element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// `|a − b| / max(|a|, |b|, 1)`: relative for large gradients, absolute near zero.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares tape gradients of a scalar function against central differences
/// `(f(x+eps) − f(x−eps)) / 2eps` for every element of every input.
///
/// `f` receives a fresh graph and one parameter leaf per input, and returns
/// the scalar output node.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                g.shape(out)
            )));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(inputs)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        tol,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let (gp, _, op) = eval(&probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let (gm, _, om) = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * eps);
            let err = rel_error(analytic[i].data()[e], numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
