//! Central finite differences, used to audit the analytic gradients.

use super::Tensor;

/// Relative error floor below which gradient entries are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` with respect to every entry of every
/// tensor in `params`, with step `h`.
pub fn central_differences(
    params: &[Tensor],
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> Vec<Tensor> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = f(&work);
            work[p].data_mut()[i] = orig - h;
            let down = f(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest relative error over all entries of paired gradient lists.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(x, y)| relative_error(*x, *y)))
        .fold(0.0, f64::max)
}
