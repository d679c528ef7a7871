//! Central finite-difference gradient checking (float64).
//!
//! Only the forward pass is evaluated for the numeric side, so the check is
//! independent of the backward rules it verifies.

use super::array::Array;
use super::graph::{Graph, Var};
use super::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with an absolute floor so exact zeros compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Checks every scalar of every parameter in `store`.
pub fn check_store(
    store: &ParamStore<f64>,
    h: f64,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> GradCheckReport {
    check_store_subset(store, h, usize::MAX, build)
}

/// Like [`check_store`] but samples at most `per_param` scalars per parameter.
pub fn check_store_subset(
    store: &ParamStore<f64>,
    h: f64,
    per_param: usize,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let analytic = g.backward(loss).expect("scalar loss").for_store(store);
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l).item()
    };
    check_against(store, &analytic, h, per_param, eval)
}

/// Compares precomputed `analytic` gradients with central differences of `eval`.
///
/// Useful when the analytic side comes from a different graph than the numeric
/// one, e.g. a straight-through estimator checked against its linearization.
pub fn check_against(
    store: &ParamStore<f64>,
    analytic: &[Array<f64>],
    h: f64,
    per_param: usize,
    eval: impl Fn(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut probe = store.clone();
    for id in 0..store.len() {
        let n = store.value(id).len();
        let stride = if n <= per_param { 1 } else { n.div_ceil(per_param) };
        for idx in (0..n).step_by(stride) {
            let orig = store.value(id).data()[idx];
            probe.value_mut(id).data_mut()[idx] = orig + h;
            let plus = eval(&probe);
            probe.value_mut(id).data_mut()[idx] = orig - h;
            let minus = eval(&probe);
            probe.value_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id].data()[idx];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{idx}] analytic {a:e} numeric {numeric:e}", store.name(id));
            }
        }
    }
    report
}

/// Per-parameter worst relative error, for reporting by parameter group.
pub fn check_store_by_param(
    store: &ParamStore<f64>,
    h: f64,
    per_param: usize,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> Vec<(String, f64, f64)> {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let analytic: Vec<Array<f64>> = g.backward(loss).expect("scalar loss").for_store(store);
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l).item()
    };
    let mut probe = store.clone();
    let mut out = Vec::new();
    for id in 0..store.len() {
        let n = store.value(id).len();
        let stride = if n <= per_param { 1 } else { n.div_ceil(per_param) };
        let mut worst = 0.0f64;
        let mut gmax = 0.0f64;
        for idx in (0..n).step_by(stride) {
            let orig = store.value(id).data()[idx];
            probe.value_mut(id).data_mut()[idx] = orig + h;
            let plus = eval(&probe);
            probe.value_mut(id).data_mut()[idx] = orig - h;
            let minus = eval(&probe);
            probe.value_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id].data()[idx];
            worst = worst.max(rel_err(a, numeric));
            gmax = gmax.max(a.abs());
        }
        out.push((store.name(id).to_string(), worst, gmax));
    }
    out
}
