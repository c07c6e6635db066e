use crate::error::Result;
use crate::numcore::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckTolerance {
    /// Central-difference step.
    pub step: f64,
    /// Max relative error for entries with a non-negligible analytic gradient.
    pub rel: f64,
    /// Below this magnitude an analytic gradient is compared absolutely.
    pub small: f64,
    pub abs: f64,
}

impl Default for GradCheckTolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel: 1e-4,
            small: 1e-8,
            abs: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the gradients currently held in `store` against central
/// differences of `loss`, entry by entry. Parameter values are restored
/// exactly after each probe.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    mut loss: F,
    tol: GradCheckTolerance,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for i in 0..store.get(id).value.len() {
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + tol.step;
            let plus = loss(store)?;
            store.get_mut(id).value.data_mut()[i] = original - tol.step;
            let minus = loss(store)?;
            store.get_mut(id).value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * tol.step);
            let analytic = store.get(id).grad.data()[i];
            let diff = (analytic - numeric).abs();
            let ok = if analytic.abs() < tol.small {
                report.max_abs_err_small = report.max_abs_err_small.max(diff);
                diff <= tol.abs
            } else {
                let rel = diff / analytic.abs().max(numeric.abs());
                report.max_rel_err = report.max_rel_err.max(rel);
                rel <= tol.rel
            };
            report.checked += 1;
            if !ok {
                report.failures.push(GradMismatch {
                    param: store.get(id).name().to_string(),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
