use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at the worst coordinate.
    pub worst_pair: (f64, f64),
    /// Largest `|analytic - numeric|`; central differences carry roughly
    /// `1e-11` of round-off, which dominates the relative error of
    /// coordinates whose gradient is below about `1e-6`.
    pub max_abs_error: f64,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F>(store: &ParamStore, loss: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let v = g.scalar(l);
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient check".into(),
        });
    }
    Ok(v)
}

/// Compares tape gradients of `loss` against central finite differences
/// (step `1e-5`) for every scalar in `store`.
pub fn gradient_check<F>(store: &mut ParamStore, tolerance: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    if !g.scalar(l).is_finite() {
        return Err(Error::NonFinite {
            context: "gradient check".into(),
        });
    }
    g.backward(l, store)?;
    let analytic: Vec<_> = store.ids().map(|id| (id, store.grad(id).clone())).collect();
    store.zero_grads();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        max_abs_error: 0.0,
        coordinates: 0,
        tolerance,
    };
    for (id, grad) in analytic {
        for k in 0..grad.len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + FD_STEP;
            let plus = eval(store, &mut loss);
            store.value_mut(id).data_mut()[k] = orig - FD_STEP;
            let minus = eval(store, &mut loss);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * FD_STEP);
            let err = relative_error(grad.data()[k], numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((grad.data()[k] - numeric).abs());
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
                report.worst_pair = (grad.data()[k], numeric);
            }
        }
    }
    Ok(report)
}
