//! Central finite-difference checks for analytic gradients.

use crate::numerics::params::{ParamId, ParamSet};

/// Central-difference derivative of `f` at `at`, one coordinate at a time.
pub fn central_diff<F>(mut f: F, at: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(at.len());
    let mut point = at.to_vec();
    for i in 0..at.len() {
        let orig = point[i];
        point[i] = orig + step;
        let plus = f(&point);
        point[i] = orig - step;
        let minus = f(&point);
        point[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// max(|a-b|) / max(1, |a|, |b|) over paired entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Worst coordinate found by [`check_params`]: which parameter, where in it,
/// analytic vs numeric value, and the relative error.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub param_name: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked_values: usize,
}

/// Compare analytic gradients against central differences for every listed
/// parameter. `loss_fn` must evaluate the loss from the current contents of
/// `params` (re-running any stochastic parts identically each call);
/// `analytic` maps a parameter to its already-computed gradient.
pub fn check_params<F>(
    params: &mut ParamSet,
    ids: &[ParamId],
    analytic: impl Fn(ParamId) -> Vec<f64>,
    mut loss_fn: F,
    step: f64,
) -> GradCheckReport
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        param_name: String::new(),
        coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked_values: 0,
    };
    for &id in ids {
        let grad = analytic(id);
        let len = params.data(id).len();
        assert_eq!(grad.len(), len, "gradient length mismatch for {}", params.name(id));
        for i in 0..len {
            let orig = params.data(id)[i];
            params.data_mut(id)[i] = orig + step;
            let plus = loss_fn(params);
            params.data_mut(id)[i] = orig - step;
            let minus = loss_fn(params);
            params.data_mut(id)[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad[i];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            report.checked_values += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.param_name = params.name(id).to_string();
                report.coordinate = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
