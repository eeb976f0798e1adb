//! Central finite differences and tolerance comparisons.

use crate::tensor::DenseMatrix;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x + h e_ij) − f(x − h e_ij)) / 2h` for every entry.
pub fn central_difference(f: impl Fn(&DenseMatrix) -> f64, at: &DenseMatrix, h: f64) -> DenseMatrix {
    let mut probe = at.clone();
    let mut out = DenseMatrix::zeros(at.rows(), at.cols());
    for k in 0..at.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Worst violation of `|a − b| <= atol + rtol·|b|`, reported as an error message.
pub fn assert_close(actual: &DenseMatrix, expected: &DenseMatrix, rtol: f64, atol: f64) -> Result<(), String> {
    if actual.shape() != expected.shape() {
        return Err(format!("shape {:?} vs {:?}", actual.shape(), expected.shape()));
    }
    let mut worst: Option<(usize, f64, f64)> = None;
    for (k, (a, b)) in actual.data().iter().zip(expected.data()).enumerate() {
        let excess = (a - b).abs() - (atol + rtol * b.abs());
        if !(excess <= 0.0) && worst.is_none_or(|(_, _, e)| excess > e) {
            worst = Some((k, *a, excess));
        }
    }
    match worst {
        None => Ok(()),
        Some((k, a, _)) => Err(format!(
            "entry {k}: got {a:e}, expected {:e} (rtol {rtol:e}, atol {atol:e})",
            expected.data()[k]
        )),
    }
}
