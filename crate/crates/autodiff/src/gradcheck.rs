//! Central finite-difference oracle for tests. Compiled only with the
//! `gradcheck` feature.

use crate::{Graph, ParamStore, Result, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that two tiny
/// gradients are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares backward gradients of every trainable entry in `store` against
/// `(f(p+h) − f(p−h)) / 2h`. `loss` must rebuild the whole forward pass from
/// the store and return its scalar output node; it is called repeatedly and
/// must be deterministic (reseed any RNG inside it).
pub fn check<F>(store: &mut ParamStore<f64>, h: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = loss(store, &mut g)?;
    g.backward(out, store)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(s, &mut g)?;
        Ok(g.value(v).item())
    };
    for id in ids {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.grad(id)[i];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
