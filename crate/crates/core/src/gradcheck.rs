//! Central finite-difference gradient checking.
//!
//! Independent of the tape: it only re-runs a scalar function on perturbed
//! copies of the parameter store.

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore};

/// Outcome of comparing analytic and numeric derivatives over sampled entries.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero derivatives
/// from dominating through round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `d loss / d param[entry]` for each `(param, entry)` pair.
///
/// `analytic` must hold gradients already accumulated by one backward pass of
/// the same `loss` closure.
pub fn check(
    store: &mut ParamStore,
    entries: &[(ParamId, usize)],
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradReport> {
    let mut report = GradReport::default();
    for &(id, k) in entries {
        let analytic = store.tensor(id).grad().expect("parameter tracks gradients")[k];
        let orig = store.tensor(id).values()[k];
        store.tensor_mut(id).values_mut()[k] = orig + step;
        let plus = loss(store)?;
        store.tensor_mut(id).values_mut()[k] = orig - step;
        let minus = loss(store)?;
        store.tensor_mut(id).values_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let rel = relative_error(analytic, numeric, floor);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.get(id).name.clone(), k, analytic, numeric));
        }
    }
    Ok(report)
}

/// Every entry of every listed parameter.
pub fn all_entries(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
    ids.iter()
        .flat_map(|&id| (0..store.tensor(id).numel()).map(move |k| (id, k)))
        .collect()
}
