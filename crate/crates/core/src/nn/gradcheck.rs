//! Central finite-difference gradient checking in 64-bit precision.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is checking.

use crate::error::Result;
use crate::nn::{Gradients, Graph, ParamRegistry, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const REL_FLOOR: f64 = 1e-6;

/// Central difference of a scalar function at `x`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + eps;
            let up = f(&buf);
            buf[i] = x[i] - eps;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Compares backward gradients of every registry entry with central
/// differences of `loss`.
pub fn check_params<F>(registry: &ParamRegistry<f64>, loss: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut grads = Gradients::zeros_like(registry);
    {
        let mut g = Graph::with_params(registry);
        let l = loss(&mut g)?;
        g.backward(l, &mut grads)?;
    }
    let eval = |reg: &ParamRegistry<f64>| -> Result<f64> {
        let mut g = Graph::with_params(reg);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };

    let mut work = registry.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let names: Vec<String> = registry.names().map(str::to_string).collect();
    for name in &names {
        let analytic = grads
            .get(name)
            .expect("zeros_like covers registry")
            .to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let n = (up - down) / (2.0 * eps);
            let e = rel_err(a, n, REL_FLOOR);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = e;
                report.worst = format!("{name}[{i}]");
                report.worst_analytic = a;
                report.worst_numeric = n;
            }
        }
    }
    Ok(report)
}
