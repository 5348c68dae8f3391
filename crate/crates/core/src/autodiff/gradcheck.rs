//! Central finite differences, used as an independent oracle for the
//! analytic gradients produced by [`super::Graph::backward`].

/// Relative error with a floor on the denominator so that components whose
/// true gradient is zero compare on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate `i`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: analytic.len(),
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(*a, *n);
        if e > report.max_relative_error {
            report.max_relative_error = e;
            report.worst_index = i;
        }
    }
    report
}
