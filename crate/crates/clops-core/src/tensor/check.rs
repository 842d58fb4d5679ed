//! Finite-difference gradient validation.

use crate::elem::Elem;
use crate::error::Result;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

const REL_ERR_FLOOR: f64 = 1e-8;

/// Differences below this are indistinguishable from central-difference
/// roundoff (loss cancellation of order eps/h) and are not counted.
const ABS_NOISE_FLOOR: f64 = 1e-7;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < ABS_NOISE_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare the autodiff gradient of a scalar-valued function against central
/// differences, elementwise over `x`. Returns the maximum relative error.
/// Run with `E = f64` for meaningful tolerances.
pub fn finite_diff_check<E, F>(mut f: F, x: &[E], shape: &[usize], h: E) -> Result<f64>
where
    E: Elem,
    F: FnMut(&mut Graph<E>, Var) -> Var,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.to_vec(), shape.to_vec());
    let loss = f(&mut g, xv);
    g.backward(loss)?;
    let analytic: Vec<f64> = g
        .grad(xv)
        .expect("input gradient populated")
        .iter()
        .map(|&v| v.to_f64())
        .collect();

    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let mut eval = |xi: E| -> f64 {
            let mut pert = x.to_vec();
            pert[i] = xi;
            let mut g = Graph::new();
            let v = g.leaf(pert, shape.to_vec());
            let loss = f(&mut g, v);
            g.value(loss)[0].to_f64()
        };
        let fp = eval(x[i] + h);
        let fm = eval(x[i] - h);
        let numeric = (fp - fm) / (2.0 * h.to_f64());
        max_err = max_err.max(rel_err(analytic[i], numeric));
    }
    Ok(max_err)
}

/// Finite-difference check over stored parameters. For each parameter tensor,
/// up to `samples_per_param` elements (evenly spaced) are perturbed. The loss
/// function must be deterministic. Returns the maximum relative error.
pub fn finite_diff_check_params<E, F>(
    store: &mut ParamStore<E>,
    mut loss_fn: F,
    h: E,
    samples_per_param: usize,
) -> Result<f64>
where
    E: Elem,
    F: FnMut(&mut Graph<E>, &ParamStore<E>) -> Var,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store);
    g.backward(loss)?;
    g.collect_grads(store);
    drop(g);

    let analytic: Vec<Vec<f64>> = store
        .params
        .iter()
        .map(|p| p.grad.iter().map(|&v| v.to_f64()).collect())
        .collect();

    let mut max_err = 0.0f64;
    let n_params = store.len();
    for pid in 0..n_params {
        let numel = store.get(pid).numel();
        let n_samples = samples_per_param.min(numel);
        for s in 0..n_samples {
            let idx = s * numel / n_samples;
            let orig = store.get(pid).value[idx];
            let mut eval = |v: E, store: &mut ParamStore<E>, pid: ParamId| -> Result<f64> {
                store.value_mut(pid)[idx] = v;
                let mut g = Graph::new();
                let loss = loss_fn(&mut g, store);
                Ok(g.value(loss)[0].to_f64())
            };
            let fp = eval(orig + h, store, pid)?;
            let fm = eval(orig - h, store, pid)?;
            store.value_mut(pid)[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h.to_f64());
            max_err = max_err.max(rel_err(analytic[pid][idx], numeric));
        }
    }
    Ok(max_err)
}
