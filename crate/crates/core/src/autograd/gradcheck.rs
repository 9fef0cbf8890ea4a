use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{MapexError, Result};

/// Absolute floor on the relative-error denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares analytic gradients of `f` against central differences over every coordinate of
/// every parameter and returns the worst relative error.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_sampled(store, eps, usize::MAX, f)
}

/// Like [`grad_check`], but probes at most `max_per_param` evenly spaced coordinates per tensor.
pub fn grad_check_sampled<F>(store: &mut ParamStore, eps: f64, max_per_param: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    Ok(grad_check_report(store, eps, max_per_param, f)?.max_rel_error)
}

/// Worst coordinate found by a gradient check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn grad_check_report<F>(store: &mut ParamStore, eps: f64, max_per_param: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(MapexError::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_param_grads(store);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, store)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(MapexError::Numeric(format!("grad_check: function returned {v}")));
        }
        Ok(v)
    };

    let mut worst = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|i| i * n / max_per_param).collect()
        };
        for j in coords {
            let analytic = store.grad(id).data()[j];
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            worst.coordinates += 1;
            if rel > worst.max_rel_error {
                worst = GradCheckReport {
                    max_rel_error: rel,
                    param: store.get(id).name.clone(),
                    index: j,
                    analytic,
                    numeric,
                    coordinates: worst.coordinates,
                };
            }
        }
    }
    store.zero_grad();
    Ok(worst)
}
