//! Central finite differences, used as an independent gradient oracle.

use crate::error::Result;

/// `∂f/∂x_i ≈ (f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest coordinate-wise relative error, with `floor` guarding
/// coordinates where both values are essentially zero.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Error floor for [`max_rel_error`] tied to the gradient's own scale, so
/// entries many orders below the largest one are judged on absolute error.
pub fn grad_floor(g: &[f64]) -> f64 {
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (1e-4 * scale).max(1e-12)
}
