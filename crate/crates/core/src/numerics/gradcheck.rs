use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x`:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every entry.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::domain(
            "finite_diff_grad",
            format!("step h = {h} must be positive"),
        ));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = probe[(r, c)];
            probe[(r, c)] = orig + h;
            let plus = f(&probe);
            probe[(r, c)] = orig - h;
            let minus = f(&probe);
            probe[(r, c)] = orig;
            for value in [plus, minus] {
                if !value.is_finite() {
                    return Err(Error::Oracle {
                        row: r,
                        col: c,
                        value,
                    });
                }
            }
            grad[(r, c)] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Max over entries of `|a − b| / max(1, |b|)`, with `b` the reference.
pub fn max_rel_error(analytic: &Matrix, reference: &Matrix) -> f64 {
    assert_eq!(
        analytic.shape(),
        reference.shape(),
        "max_rel_error shape mismatch"
    );
    analytic
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}
