//! Central finite-difference gradient checking in 64-bit.

use rand::seq::index::sample;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::StreamRng;

/// Worst disagreement found by [`check_params`].
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-5;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with step `h`, sampling up to `per_param` entries of every
/// parameter (all entries when `per_param` is `None`). Parameters that
/// `skip` returns true for are not perturbed.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    h: f64,
    per_param: Option<usize>,
    rng: &mut StreamRng,
    skip: impl Fn(&str) -> bool,
    f: F,
) -> Result<GradReport>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = store.bind();
        let loss = f(&mut g)?;
        Ok(g.value(loss)[0])
    };

    let analytic: Vec<Vec<f64>> = {
        let mut g = store.bind();
        let loss = f(&mut g)?;
        let mut grads = g.backward(loss)?;
        (0..store.len())
            .map(|i| {
                grads
                    .take(Var(i))
                    .unwrap_or_else(|| vec![0.0; store.get(crate::ParamId(i)).tensor.len()])
            })
            .collect()
    };

    let mut report = GradReport::default();
    for pi in 0..store.len() {
        let id = crate::ParamId(pi);
        let name = store.get(id).name.clone();
        if skip(&name) {
            continue;
        }
        let n = store.get(id).tensor.len();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = store.get(id).tensor.data()[j];
            store.get_mut(id).tensor.data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((name.clone(), j, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
