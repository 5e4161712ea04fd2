//! Central finite-difference verification of analytic gradients.

use rayon::prelude::*;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter path and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compare the analytic gradient of `f` against `(f(p+eps) - f(p-eps)) / 2eps`
/// for every scalar of every parameter in `store`.
///
/// `f` builds a scalar loss in the supplied graph. On return `store` holds
/// the analytic gradients and its original values.
pub fn gradient_check<F>(f: F, store: &mut ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var> + Sync,
{
    let ids: Vec<ParamId> = store.ids().collect();
    gradient_check_params(f, store, &ids, eps)
}

/// As [`gradient_check`], restricted to `ids`.
pub fn gradient_check_params<F>(f: F, store: &mut ParamStore, ids: &[ParamId], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var> + Sync,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::contract(format!("gradient check eps must lie in (0, 1e-3], got {eps}")));
    }
    if let Some(id) = ids.iter().find(|&&id| !store.get(id).all_finite()) {
        return Err(Error::numerical(format!("parameter `{}` is not finite", store.path(*id))));
    }

    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let value = g.value(loss);
    if value.len() != 1 || !value[0].is_finite() {
        return Err(Error::numerical("loss is not a finite scalar"));
    }
    g.backward_into(loss, store)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let l = f(s, &mut g)?;
        let v = g.value(l)[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::numerical("loss became non-finite under perturbation"))
        }
    };

    let jobs: Vec<(ParamId, usize)> =
        ids.iter().flat_map(|&id| (0..store.get(id).numel()).map(move |i| (id, i))).collect();
    let base: &ParamStore = store;
    let chunk = (jobs.len() / (4 * rayon::current_num_threads()).max(1)).max(1);
    let errors: Vec<Result<Vec<(f64, f64)>>> = jobs
        .par_chunks(chunk)
        .map(|batch| {
            let mut local = base.clone();
            batch
                .iter()
                .map(|&(id, i)| {
                    let orig = local.get(id).data()[i];
                    local.get_mut(id).data_mut()[i] = orig + eps;
                    let plus = eval(&local)?;
                    local.get_mut(id).data_mut()[i] = orig - eps;
                    let minus = eval(&local)?;
                    local.get_mut(id).data_mut()[i] = orig;
                    let numeric = (plus - minus) / (2.0 * eps);
                    let analytic = base.get(id).grad.as_ref().map_or(0.0, |g| g[i]);
                    Ok((analytic, numeric))
                })
                .collect()
        })
        .collect();

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, worst_pair: (0.0, 0.0), checked: jobs.len() };
    let mut k = 0;
    for chunk in errors {
        for (a, n) in chunk? {
            let e = relative_error(a, n);
            let (id, i) = jobs[k];
            if e > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = e;
                report.worst = Some((store.path(id).to_string(), i));
                report.worst_pair = (a, n);
            }
            k += 1;
        }
    }
    Ok(report)
}
