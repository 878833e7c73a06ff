use alloc::format;
use alloc::vec::Vec;

use super::{Grads, ParamStore};
use crate::{Error, Result};

/// Which scalars of each trainable tensor [`fd_check`] perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdCoverage {
    All,
    /// At most this many evenly spaced coordinates per tensor, always
    /// including the first and the last.
    PerTensor(usize),
}

fn coordinates(len: usize, coverage: FdCoverage) -> Vec<usize> {
    match coverage {
        FdCoverage::PerTensor(n) if n < len && n >= 2 => {
            let mut idx: Vec<usize> = (0..n).map(|i| i * (len - 1) / (n - 1)).collect();
            idx.dedup();
            idx
        }
        FdCoverage::PerTensor(1) if len > 1 => alloc::vec![0],
        _ => (0..len).collect(),
    }
}

/// Largest relative disagreement between `analytic` and central differences
/// of `value` around `params`:
/// `max |g − (f(p+ε) − f(p−ε)) / 2ε| / max(1, |g|)` over trainable scalars.
pub fn fd_check<F>(
    value: F,
    analytic: &Grads,
    params: &ParamStore,
    eps: f64,
    coverage: FdCoverage,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "fd_check eps must be positive, got {eps}"
        )));
    }
    let base = value(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("fd_check objective".into()));
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for id in params.ids().filter(|id| params.is_trainable(*id)) {
        let grad = analytic
            .get(id)
            .ok_or_else(|| Error::Shape(format!("no analytic gradient for {}", params.name(id))))?;
        for i in coordinates(grad.len(), coverage) {
            let orig = params.data(id)[i];
            probe.data_mut(id)[i] = orig + eps;
            let plus = value(&probe)?;
            probe.data_mut(id)[i] = orig - eps;
            let minus = value(&probe)?;
            probe.data_mut(id)[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "fd_check objective near {}[{i}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
