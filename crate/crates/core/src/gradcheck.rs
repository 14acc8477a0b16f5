//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::model::{BoundParams, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Outcome of comparing an analytic gradient with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Probes skipped because every step crossed a non-differentiable point.
    pub kinks: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Worst per-coordinate relative error between two gradient vectors.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        coordinates: analytic.len(),
        kinks: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > report.max_rel_error || e.is_nan() {
            report = GradCheckReport {
                max_rel_error: e,
                worst_index: i,
                analytic: a,
                numeric: n,
                coordinates: analytic.len(),
                kinks: 0,
            };
        }
    }
    report
}

fn check_step(step: f64) -> Result<()> {
    if !(1e-5..=1e-2).contains(&step) {
        return Err(Error::Config(format!("finite-difference step {step} outside [1e-5, 1e-2]")));
    }
    Ok(())
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn central_differences<T: Real>(
    eval: impl Fn(&Tensor<T>) -> Result<f64>,
    x: &Tensor<T>,
    step: f64,
) -> Result<Vec<f64>> {
    check_step(step)?;
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.as_f64() + step);
        let hi = eval(&probe)?;
        probe.data_mut()[i] = T::of(orig.as_f64() - step);
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // The perturbation actually applied after rounding into T.
        let h2 = T::of(orig.as_f64() + step).as_f64() - T::of(orig.as_f64() - step).as_f64();
        out.push((hi - lo) / h2);
    }
    Ok(out)
}

/// Checks the tape gradient of scalar-valued `f` at `x` against central differences.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    check_step(step)?;
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&tape, leaf)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<f64> = grads.get_or_zeros(leaf).data().iter().map(|v| v.as_f64()).collect();
    let numeric = central_differences(
        |probe| {
            let tape = Tape::new();
            let v = tape.constant(probe.clone());
            Ok(f(&tape, v)?.value().item().as_f64())
        },
        x,
        step,
    )?;
    Ok(compare_gradients(&analytic, &numeric))
}

/// A scalar function of a parameter store, evaluable at any precision.
pub trait Objective {
    fn eval<'t, U: Real>(&self, tape: &'t Tape<U>, params: &BoundParams<'t, U>) -> Result<Var<'t, U>>;
}

/// Indices probed in a tensor of `numel` entries: all, or `max` spread evenly.
fn probe_indices(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < numel => (0..m).map(|k| k * numel / m).collect(),
        _ => (0..numel).collect(),
    }
}

/// Smallest step `check_parameters` falls back to near a kink.
pub const MIN_STEP: f64 = 1e-5;

/// Compares the tape gradient of `obj` in precision `T` with 64-bit central
/// differences, tensor by tensor, in store order.
///
/// A probe whose `±step` evaluations take a different piecewise branch than
/// the base point (see [`Tape::branch_signature`]) does not measure a
/// derivative; it is retried at a tenth of the step down to [`MIN_STEP`],
/// then counted in `kinks` and left out of the error.
pub fn check_parameters<T: Real, O: Objective>(
    obj: &O,
    store: &ParameterStore<T>,
    step: f64,
    max_coords: Option<usize>,
) -> Result<Vec<(String, GradCheckReport)>> {
    check_step(step)?;
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let root = obj.eval(&tape, &bound)?;
    let grads = tape.backward(root)?;

    let mut probe: ParameterStore<f64> = store.cast();
    let eval64 = |s: &ParameterStore<f64>| -> Result<(f64, u64)> {
        let tape = Tape::new();
        let v = obj.eval(&tape, &s.bind_frozen(&tape))?.value().item();
        Ok((v, tape.branch_signature()))
    };
    let base = eval64(&probe)?.1;
    let mut out = Vec::with_capacity(store.len());
    for (name, var) in bound.iter() {
        let g = grads
            .get(var)
            .ok_or_else(|| Error::MissingGradient(name.to_owned()))?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut kinks = 0;
        for i in probe_indices(var.numel(), max_coords) {
            let orig = probe.require(name)?.data()[i];
            let mut at = |v: f64| -> Result<(f64, u64)> {
                probe.get_mut(name).expect("present").data_mut()[i] = v;
                eval64(&probe)
            };
            let mut h = step;
            let diff = loop {
                let (hi, s_hi) = at(orig + h)?;
                let (lo, s_lo) = at(orig - h)?;
                if s_hi == base && s_lo == base {
                    break Some((hi - lo) / (2.0 * h));
                }
                if h / 10.0 < MIN_STEP * (1.0 - 1e-9) {
                    break None;
                }
                h /= 10.0;
            };
            at(orig)?;
            match diff {
                Some(d) => {
                    analytic.push(g.data()[i].as_f64());
                    numeric.push(d);
                }
                None => kinks += 1,
            }
        }
        let mut report = compare_gradients(&analytic, &numeric);
        report.kinks = kinks;
        out.push((name.to_owned(), report));
    }
    Ok(out)
}
