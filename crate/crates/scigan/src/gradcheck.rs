//! Central finite-difference gradient oracle.
//!
//! Used by tests across the crate to validate reverse-mode gradients.
//! Only forward evaluations of the supplied loss closure are used, so the
//! check is independent of the tape's backward implementation.

use crate::nn::{ParamId, ParamStore};
use crate::tape::ParamGrads;

/// Maximum relative error between tape gradients and central finite
/// differences with step `h`, over every coordinate of every listed
/// parameter. Relative error uses `max(|fd|, |ad|, 1)` as denominator.
pub fn finite_difference_max_rel_err(
    store: &mut ParamStore,
    ids: &[ParamId],
    grads: &ParamGrads,
    h: f64,
    mut loss_fn: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut max_rel: f64 = 0.0;
    for &id in ids {
        let len = store.get(id).len();
        for i in 0..len {
            let original = store.get(id).as_slice()[i];
            store.get_mut(id).as_mut_slice()[i] = original + h;
            let plus = loss_fn(store);
            store.get_mut(id).as_mut_slice()[i] = original - h;
            let minus = loss_fn(store);
            store.get_mut(id).as_mut_slice()[i] = original;
            let fd = (plus - minus) / (2.0 * h);
            let ad = grads.get(id).map_or(0.0, |g| g.as_slice()[i]);
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
