//! Central finite-difference verification of reverse-mode gradients.

use rayon::prelude::*;

use super::tensor::ParamSet;
use super::Real;

/// Gradients below this magnitude are skipped when forming relative errors.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub skipped: usize,
}

impl std::fmt::Display for FiniteDiffReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max rel err {:.3e} at {}[{}] ({} checked, {} below floor)",
            self.max_rel_err, self.worst_param, self.worst_index, self.checked, self.skipped
        )
    }
}

/// Compares analytic gradients against central finite differences of `loss`.
///
/// `analytic` carries the reverse-mode gradients (one backward pass) for the
/// same parameter values as `params`. Every element with `|analytic| >
/// GRAD_CHECK_FLOOR` is perturbed by `±h` and the relative error
/// `|a - c| / max(|a|, |c|)` is recorded; the maximum is returned.
///
/// `loss` must be deterministic. Evaluations run in parallel; the reduction
/// is order-independent (a plain max).
pub fn finite_diff_check<R, F>(
    params: &ParamSet<R>,
    analytic: &ParamSet<R>,
    h: f64,
    loss: F,
) -> FiniteDiffReport
where
    R: Real,
    F: Fn(&ParamSet<R>) -> R + Sync,
{
    let mut work: Vec<(String, usize, f64)> = Vec::new();
    for (name, t) in analytic.iter() {
        let grad = t
            .grad
            .as_ref()
            .unwrap_or_else(|| panic!("analytic gradient missing for {name}"));
        for (i, g) in grad.iter().enumerate() {
            work.push((name.to_string(), i, g.as_f64()));
        }
    }

    let results: Vec<(f64, f64)> = work
        .par_iter()
        .map_init(
            || params.clone(),
            |local, (name, i, a)| {
                if a.abs() <= GRAD_CHECK_FLOOR {
                    return (f64::NAN, *a);
                }
                let orig = local.get(name).data[*i];
                let hr = R::from_f64(h);
                local.get_mut(name).data[*i] = orig + hr;
                let plus = loss(local).as_f64();
                local.get_mut(name).data[*i] = orig - hr;
                let minus = loss(local).as_f64();
                local.get_mut(name).data[*i] = orig;
                let central = (plus - minus) / (2.0 * h);
                let denom = a.abs().max(central.abs());
                ((a - central).abs() / denom, *a)
            },
        )
        .collect();

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        skipped: 0,
    };
    for ((name, i, _), (err, _)) in work.iter().zip(&results) {
        if err.is_nan() {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        if *err > report.max_rel_err {
            report.max_rel_err = *err;
            report.worst_param = name.clone();
            report.worst_index = *i;
        }
    }
    report
}
