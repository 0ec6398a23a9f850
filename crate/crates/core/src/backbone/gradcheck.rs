//! Central-difference gradient checking over a double-precision store.

use rand::seq::index;
use rand::Rng;

use super::params::{Grads, ParamId, ParameterStore};

/// Relative error with a small absolute floor so that near-zero pairs do not
/// blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

#[derive(Clone, Debug)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
}

/// Up to `per_param` coordinates from every parameter, without replacement.
pub fn sample_coords<R: Rng + ?Sized>(
    store: &ParameterStore<f64>,
    per_param: usize,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for (i, p) in store.params().iter().enumerate() {
        let n = p.numel();
        if n <= per_param {
            out.extend((0..n).map(|j| (ParamId(i), j)));
        } else {
            out.extend(index::sample(rng, n, per_param).into_iter().map(|j| (ParamId(i), j)));
        }
    }
    out
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h` at each coordinate.
/// The store is restored after every probe.
pub fn check<F>(
    store: &mut ParameterStore<f64>,
    analytic: &Grads<f64>,
    coords: &[(ParamId, usize)],
    h: f64,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&ParameterStore<f64>) -> f64,
{
    check_with(store, analytic, coords, loss, |probe| central(probe, h))
}

/// Like [`check`] but with the Richardson extrapolation
/// `(4 D(h/2) − D(h)) / 3` of the central difference, whose truncation error
/// is fourth order. Suited to sharply curved losses where a small `h` would
/// be roundoff-limited.
pub fn check_extrapolated<F>(
    store: &mut ParameterStore<f64>,
    analytic: &Grads<f64>,
    coords: &[(ParamId, usize)],
    h: f64,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&ParameterStore<f64>) -> f64,
{
    check_with(store, analytic, coords, loss, |probe| (4.0 * central(&mut *probe, h / 2.0) - central(probe, h)) / 3.0)
}

fn central(probe: &mut dyn FnMut(f64) -> f64, h: f64) -> f64 {
    (probe(h) - probe(-h)) / (2.0 * h)
}

fn check_with<F, D>(
    store: &mut ParameterStore<f64>,
    analytic: &Grads<f64>,
    coords: &[(ParamId, usize)],
    loss: F,
    derivative: D,
) -> GradCheckReport
where
    F: Fn(&ParameterStore<f64>) -> f64,
    D: Fn(&mut dyn FnMut(f64) -> f64) -> f64,
{
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for &(id, j) in coords {
        let orig = store.value(id)[j];
        let numeric = derivative(&mut |d: f64| {
            store.value_mut(id)[j] = orig + d;
            let v = loss(store);
            store.value_mut(id)[j] = orig;
            v
        });
        let a = analytic.get(id)[j];
        let e = rel_err(a, numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some(Worst { param: store.param(id).name.clone(), index: j, analytic: a, numeric });
        }
    }
    report
}
