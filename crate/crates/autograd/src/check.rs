//! Finite-difference gradient checking.

use crate::params::{ParamId, ParamStore};

/// Relative error used by the checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` with respect to one scalar of one parameter.
pub fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    step: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.get(id).data()[index];
    store.get_mut(id).data_mut()[index] = orig + step;
    let plus = f(store);
    store.get_mut(id).data_mut()[index] = orig - step;
    let minus = f(store);
    store.get_mut(id).data_mut()[index] = orig;
    (plus - minus) / (2.0 * step)
}
