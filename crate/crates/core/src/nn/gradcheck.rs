//! Central finite-difference gradient checking.

use serde::Serialize;

use super::params::ParamStore;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// One-sided slopes that disagree by more than this fraction flag a kink.
const KINK_TOL: f64 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Entries where forward and backward slopes disagree.
    pub non_differentiable: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub h: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn offenders(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| !(p.max_rel_error <= self.tol))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences for every scalar
/// of every parameter.
///
/// `loss(store, with_grad)` must return the loss at the current parameter
/// values and, when `with_grad` is set, add its gradient into the store.
/// Entries at a non-differentiable point are reported with infinite error.
pub fn grad_check<F>(store: &mut ParamStore, mut loss: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    store.zero_grads();
    let base = loss(store, true)?;
    if !base.is_finite() {
        return Err(Error::Numerical(format!("loss is not finite at the check point ({base})")));
    }
    let analytic: Vec<Tensor2D> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grads();
    let f0 = loss(store, false)?;

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            non_differentiable: 0,
        };
        for k in 0..grad.len() {
            let x = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = x + h;
            let fp = loss(store, false)?;
            store.get_mut(id).value.data_mut()[k] = x - h;
            let fm = loss(store, false)?;
            store.get_mut(id).value.data_mut()[k] = x;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::Numerical(format!("loss not finite while perturbing {}[{k}]", check.name)));
            }
            let forward = (fp - f0) / h;
            let backward = (f0 - fm) / h;
            let err = if (forward - backward).abs() > KINK_TOL * forward.abs().max(backward.abs()).max(1.0) {
                check.non_differentiable += 1;
                f64::INFINITY
            } else {
                relative_error(grad.data()[k], (fp - fm) / (2.0 * h))
            };
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = k;
            }
        }
        params.push(check);
    }
    store.zero_grads();
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        max_rel_error,
        h,
        tol,
        passed: max_rel_error <= tol,
    })
}
