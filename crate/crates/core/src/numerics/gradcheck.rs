//! Central finite-difference validation of tape gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::optim::ParamStore;
use super::tape::{NodeId, Tape};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (parameter name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares analytic gradients against `(f(p+h) - f(p-h)) / 2h` on a random
/// subsample of coordinates per parameter.
///
/// `build` must construct the loss deterministically from the store: same
/// parameters in, same loss out. The reported error is relative with a unit
/// floor, `|a - n| / max(|a|, |n|, 1)`, so near-zero gradients are judged on
/// absolute error at the loss scale instead of exploding the ratio.
pub fn grad_check(
    store: &mut ParamStore,
    samples_per_param: usize,
    h: f32,
    rng: &mut impl Rng,
    build: impl Fn(&mut Tape, &ParamStore) -> NodeId,
) -> GradCheckReport {
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss, store);
    let analytic: Vec<Vec<f32>> =
        store.ids().map(|id| store.grad(id).as_slice().to_vec()).collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    let ids: Vec<_> = store.ids().collect();
    for (pi, &pid) in ids.iter().enumerate() {
        let len = store.value(pid).len();
        let mut coords: Vec<usize> = (0..len).collect();
        coords.shuffle(rng);
        coords.truncate(samples_per_param.min(len));
        for &c in &coords {
            let orig = store.value(pid).as_slice()[c];
            store.value_mut(pid).as_mut_slice()[c] = orig + h;
            let f_plus = eval(store, &build);
            store.value_mut(pid).as_mut_slice()[c] = orig - h;
            let f_minus = eval(store, &build);
            store.value_mut(pid).as_mut_slice()[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h as f64);
            let a = analytic[pi][c] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.name(pid).to_string(), c, a, numeric));
            }
        }
    }
    store.zero_grads();
    report
}

fn eval(store: &ParamStore, build: &impl Fn(&mut Tape, &ParamStore) -> NodeId) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.scalar_f64(loss)
}
