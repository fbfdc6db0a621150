//! Central-difference verification of analytic gradients over a whole
//! parameter store. The loss closure owns the forward pass; this module only
//! perturbs parameters and compares.

use crate::error::Result;
use crate::parallel::par_map;
use crate::params::{GradMap, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Compares the gradient returned by `loss` against central differences with
/// step `eps`, for every entry of every parameter. `loss` must be a pure
/// function of the store.
pub fn grad_check<F>(params: &ParamStore, eps: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, GradMap)> + Sync,
{
    let (_, analytic) = loss(params)?;

    let entries: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(path, v)| (0..v.len()).map(move |i| (path.clone(), i)))
        .collect();

    let results: Vec<Result<(f64, f64)>> = par_map(&entries, |(path, idx)| {
        let mut store = params.clone();
        store.get_mut(path).unwrap().data[*idx] += eps;
        let plus = loss(&store)?.0;
        store.get_mut(path).unwrap().data[*idx] -= 2.0 * eps;
        let minus = loss(&store)?.0;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.get(path).map_or(0.0, |g| g[*idx]);
        Ok((a, numeric))
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: entries.len(),
    };
    for ((path, idx), res) in entries.iter().zip(results) {
        let (a, n) = res?;
        let err = rel_err(a, n);
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst_path = path.clone();
            report.worst_index = *idx;
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}
