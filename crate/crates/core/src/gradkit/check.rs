/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a `1e-8` floor on the denominator.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + eps;
    let fp = f(&p);
    p[i] = x[i] - eps;
    let fm = f(&p);
    (fp - fm) / (2.0 * eps)
}

/// Compares `analytic` against central differences of `f` at `x` over
/// `coords` (all coordinates when `None`).
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
) -> FdReport {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut report = FdReport { max_rel_error: -1.0, worst: 0, analytic: 0.0, numeric: 0.0 };
    for &i in coords {
        let n = central_difference(&mut f, x, i, eps);
        let e = relative_error(analytic[i], n);
        if e > report.max_rel_error {
            report = FdReport { max_rel_error: e, worst: i, analytic: analytic[i], numeric: n };
        }
    }
    report.max_rel_error = report.max_rel_error.max(0.0);
    report
}
