//! Central finite-difference verification of recorded adjoints.
//!
//! The checker only ever evaluates the forward pass; it never calls into the
//! adjoint code, so it serves as an independent oracle for [`Graph::backward`].

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Default perturbation for central differences.
pub const STEP: f64 = 1e-5;

/// Denominator floor for the relative error: components smaller than this
/// are judged on absolute error instead (a tolerance of 1e-4 then means an
/// absolute error below 1e-8). Gradients that are exactly zero, such as the
/// key bias of attention, still show central-difference rounding noise of
/// order 1e-9.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input index, flat element, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.max_rel_error.is_finite()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || other.max_rel_error.is_nan() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `f` with respect to every input. `per_input` caps the number of checked
/// elements per input (chosen at random with `rng`); `None` checks them all.
pub fn check<F, R>(inputs: &[Tensor], f: F, per_input: Option<usize>, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("parameter leaves always carry gradients");
        let n = inputs[i].numel();
        let picks: Vec<usize> = match per_input {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for e in picks {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}
