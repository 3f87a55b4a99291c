//! Central-difference verification of the analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Worst element of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the tape's gradient of `f` against `(f(θ+h) − f(θ−h)) / 2h`
/// for every scalar entry of every parameter.
///
/// `f` is rebuilt on a fresh graph for each probe, so it must be
/// deterministic (no unseeded dropout).
pub fn finite_difference_check<T, F>(
    f: F,
    params: &[Tensor<T>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step {step} must be positive")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss)?.item()?.as_f64();
    if !base.is_finite() {
        return Err(Error::NumericInstability(format!("non-finite loss {base} at the base point")));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    drop(g);

    let eval = |probe: &[Tensor<T>], param: usize, element: usize| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out)?.item()?.as_f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericInstability(format!(
                "non-finite value {v} while probing parameter {param} element {element}"
            )))
        }
    };

    let h = T::of(step);
    let mut probe: Vec<Tensor<T>> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut worst = ParamCheck {
            param: pi,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for e in 0..p.len() {
            let orig = p.data()[e];
            probe[pi].data_mut()[e] = orig + h;
            let plus = eval(&probe, pi, e)?;
            probe[pi].data_mut()[e] = orig - h;
            let minus = eval(&probe, pi, e)?;
            probe[pi].data_mut()[e] = orig;
            // the realized step may differ from `step` after rounding in T
            let width = ((orig + h) - (orig - h)).as_f64();
            let numeric = (plus - minus) / width;
            let a = analytic[pi].data()[e].as_f64();
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || e == 0 {
                worst.max_rel_error = err;
                worst.worst_element = e;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        worst.passed = worst.max_rel_error <= tolerance;
        checks.push(worst);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        params: checks,
        tolerance,
        passed,
    })
}
