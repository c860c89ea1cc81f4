/// Worst coordinate found by a finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss_fn` at every
/// coordinate of `params`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], analytic: &[f64], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_at(loss_fn, params, analytic, &coords, eps)
}

/// Like [`finite_diff_check`] restricted to the listed coordinates.
pub fn finite_diff_check_at<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = loss_fn(&theta);
        theta[i] = orig - eps;
        let minus = loss_fn(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report = GradCheckReport {
                max_rel_error: err.max(report.max_rel_error),
                worst_index: i,
                analytic: analytic[i],
                numeric,
                checked: report.checked,
            };
        }
    }
    report
}
