//! Central finite-difference gradient checking at 64-bit precision.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation for the central difference.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero analytically and numerically compare by absolute difference.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per input (0 = all).
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            max_entries: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// First entry whose perturbed evaluation was not finite.
    pub non_finite: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs
            .iter()
            .all(|r| r.non_finite.is_none() && r.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn entries(n: usize, max: usize) -> Vec<usize> {
    if max == 0 || n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

struct Tracker {
    report: InputReport,
    floor: f64,
}

impl Tracker {
    fn new(name: String, floor: f64) -> Self {
        Self {
            report: InputReport {
                name,
                checked: 0,
                max_rel_error: 0.0,
                worst_index: None,
                non_finite: None,
            },
            floor,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, plus: f64, minus: f64, step: f64) {
        self.report.checked += 1;
        if !(plus.is_finite() && minus.is_finite() && analytic.is_finite()) {
            self.report.non_finite.get_or_insert(index);
            return;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic, numeric, self.floor);
        if err > self.report.max_rel_error || self.report.worst_index.is_none() {
            self.report.max_rel_error = err;
            self.report.worst_index = Some(index);
        }
    }
}

/// Checks the gradient of a scalar function of one tensor. `f` must not
/// enable dropout.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let root = f(&mut tape, xv)?;
    tape.backward(root)?;
    let analytic = tape.grad_tensor(xv);

    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone(), false);
        let r = f(&mut tape, v)?;
        Ok(tape.value(r).item())
    };
    let mut tracker = Tracker::new("x".into(), opts.floor);
    let mut point = x.clone();
    for i in entries(x.numel(), opts.max_entries) {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + opts.step;
        let plus = eval(&point)?;
        point.data_mut()[i] = orig - opts.step;
        let minus = eval(&point)?;
        point.data_mut()[i] = orig;
        tracker.record(i, analytic.data()[i], plus, minus, opts.step);
    }
    Ok(GradCheckReport {
        inputs: vec![tracker.report],
        tolerance: opts.tolerance,
    })
}

/// Checks the gradient of a scalar function with respect to stored parameters.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::with_params(store);
        let root = f(&mut tape)?;
        tape.backward(root)?;
        ids.iter()
            .map(|&id| {
                let v = tape.param(id);
                tape.grad_tensor(v)
            })
            .collect()
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let r = f(&mut tape)?;
        Ok(tape.value(r).item())
    };
    let mut work = store.clone();
    let mut inputs = Vec::with_capacity(ids.len());
    for (&id, grad) in ids.iter().zip(&analytic) {
        let mut tracker = Tracker::new(store.name(id).to_string(), opts.floor);
        for i in entries(grad.numel(), opts.max_entries) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            tracker.record(i, grad.data()[i], plus, minus, opts.step);
        }
        inputs.push(tracker.report);
    }
    Ok(GradCheckReport {
        inputs,
        tolerance: opts.tolerance,
    })
}
