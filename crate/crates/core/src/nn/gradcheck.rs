//! Central finite-difference gradient verification.

use super::{Gradients, ModelParameters, Role};

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor of the relative error. Gradients smaller than this are
/// compared absolutely; with `f64` losses of order 10² the rounding noise of a
/// central difference at `h = 1e-4` is about 1e-10, far below the floor.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, as `name[index]` or `input[index]`.
    pub worst: String,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against central differences of `loss` over
/// every trainable parameter and every input coordinate.
pub fn grad_check(
    params: &ModelParameters<f64>,
    input: &[f64],
    param_grads: &Gradients<f64>,
    input_grads: &[f64],
    mut loss: impl FnMut(&ModelParameters<f64>, &[f64]) -> f64,
) -> GradCheckReport {
    assert_eq!(input.len(), input_grads.len(), "one input gradient per input value");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut note = |err: f64, what: &dyn Fn() -> String| {
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = what();
        }
    };

    let mut p = params.clone();
    for i in 0..p.len() {
        if p.entries()[i].role != Role::Param {
            continue;
        }
        for j in 0..p.value(i).len() {
            let orig = p.value(i).data()[j];
            p.value_mut(i).data_mut()[j] = orig + FD_STEP;
            let up = loss(&p, input);
            p.value_mut(i).data_mut()[j] = orig - FD_STEP;
            let down = loss(&p, input);
            p.value_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_error(param_grads.get(i).data()[j], numeric);
            note(err, &|| format!("{}[{j}]", params.entries()[i].name));
        }
    }

    let mut x = input.to_vec();
    for j in 0..x.len() {
        let orig = x[j];
        x[j] = orig + FD_STEP;
        let up = loss(params, &x);
        x[j] = orig - FD_STEP;
        let down = loss(params, &x);
        x[j] = orig;
        let err = rel_error(input_grads[j], (up - down) / (2.0 * FD_STEP));
        note(err, &|| format!("input[{j}]"));
    }
    report
}
