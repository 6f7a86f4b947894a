//! Central finite-difference checks of analytic gradients.

use std::collections::HashMap;

use super::{ParameterStore, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor of [`relative_error`]: below this gradient scale the
/// error is effectively absolute.
pub const SCALE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Location of the worst entry, `name[index]`.
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = format!("{name}[{index}] analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        if other.max_rel_error >= self.max_rel_error && other.checked > 0 {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Up to `count` evenly spaced entries of a tensor of length `len`.
pub fn spread(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|k| (k * len + len / (2 * count)) / count).collect()
}

/// Checks `analytic` (the gradient of `f` at `x`) on the listed entries.
pub fn check_input(
    name: &str,
    x: &Tensor,
    analytic: &Tensor,
    entries: &[usize],
    f: &mut dyn FnMut(&Tensor) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    let mut probe = x.clone();
    for &i in entries {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.record(name, i, analytic.data()[i], (up - down) / (2.0 * FD_STEP));
    }
    out
}

/// Checks parameter gradients on up to `per_param` entries of every parameter
/// named in `analytic`. `f` evaluates the objective at a perturbed store.
pub fn check_params(
    store: &ParameterStore,
    analytic: &HashMap<String, Tensor>,
    per_param: usize,
    f: &mut dyn FnMut(&ParameterStore) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    let mut probe = store.clone();
    let mut names: Vec<&String> = analytic.keys().collect();
    names.sort();
    for name in names {
        let grad = &analytic[name];
        let Some(value) = store.get(name) else { continue };
        for i in spread(value.len(), per_param) {
            let orig = value.data()[i];
            let mut eval = |v: f64, probe: &mut ParameterStore| {
                probe.get_mut(name).expect("present").data_mut()[i] = v;
                f(probe)
            };
            let up = eval(orig + FD_STEP, &mut probe);
            let down = eval(orig - FD_STEP, &mut probe);
            probe.get_mut(name).expect("present").data_mut()[i] = orig;
            out.record(name, i, grad.data()[i], (up - down) / (2.0 * FD_STEP));
        }
    }
    out
}
