//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward values; it never looks at the analytic
//! backward pass it is compared against.

use ndarray::Array2;

use crate::autograd::{Tape, Var};
use crate::nn::{Bound, Params};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn entries(len: usize, max_per_tensor: Option<usize>) -> Vec<usize> {
    match max_per_tensor {
        Some(k) if k < len => {
            let stride = len as f64 / k as f64;
            (0..k).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compare the tape's gradient of `loss` against central differences for
/// every parameter entry (or an evenly spaced subset per tensor).
pub fn check_params<F>(params: &Params, step: f64, max_per_tensor: Option<usize>, loss: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    check_params_where(params, step, max_per_tensor, |_| true, loss)
}

/// [`check_params`] restricted to parameters whose name satisfies `select`.
pub fn check_params_where<F, S>(
    params: &Params,
    step: f64,
    max_per_tensor: Option<usize>,
    select: S,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &Bound) -> Var,
    S: Fn(&str) -> bool,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = loss(&mut tape, &bound);
    let analytic = params.grads(&bound, &tape.backward(out));

    let eval = |p: &Params| {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let o = loss(&mut t, &b);
        t.scalar(o)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut work = params.clone();
    for (pi, grad) in analytic.iter().enumerate() {
        if !select(params.name(pi)) {
            continue;
        }
        let cols = grad.ncols();
        for flat in entries(grad.len(), max_per_tensor) {
            let (r, c) = (flat / cols, flat % cols);
            let orig = work.values()[pi][[r, c]];
            work.values_mut()[pi][[r, c]] = orig + step;
            let plus = eval(&work);
            work.values_mut()[pi][[r, c]] = orig - step;
            let minus = eval(&work);
            work.values_mut()[pi][[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad[[r, c]], numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(pi).to_string(), flat));
            }
        }
    }
    report
}

/// Same check for a free input tensor instead of parameters.
pub fn check_input<F>(input: &Array2<f64>, step: f64, loss: F) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let out = loss(&mut tape, x);
    let analytic = tape.backward(out).get(x);
    let eval = |v: &Array2<f64>| {
        let mut t = Tape::new();
        let x = t.leaf(v.clone());
        let o = loss(&mut t, x);
        t.scalar(o)
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut work = input.clone();
    let cols = input.ncols();
    for flat in 0..input.len() {
        let (r, c) = (flat / cols, flat % cols);
        let orig = work[[r, c]];
        work[[r, c]] = orig + step;
        let plus = eval(&work);
        work[[r, c]] = orig - step;
        let minus = eval(&work);
        work[[r, c]] = orig;
        let err = relative_error(analytic[[r, c]], (plus - minus) / (2.0 * step));
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(("input".to_string(), flat));
        }
    }
    report
}
