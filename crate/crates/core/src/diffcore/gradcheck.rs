//! Central finite-difference oracle for gradient tests.

use super::Matrix;

/// Numerical gradient of `f` with respect to every entry of every tensor in `params`.
///
/// `f` is re-evaluated with one entry perturbed by ±h at a time.
pub fn numeric_gradients(
    params: &[Matrix],
    h: f64,
    mut f: impl FnMut(&[Matrix]) -> f64,
) -> Vec<Matrix> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Matrix::zeros(params[t].rows(), params[t].cols());
        for i in 0..params[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = f(&work);
            work[t].data_mut()[i] = orig - h;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest relative error between two gradient lists.
///
/// Each entry uses |a - n| / max(|a|, |n|, floor) so that entries near zero
/// are compared on an absolute scale.
pub fn max_relative_error(analytic: &[Matrix], numeric: &[Matrix], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&x, &y)| (x, y)).collect::<Vec<_>>())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
