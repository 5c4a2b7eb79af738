use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Central-difference Jacobian `[outputs, inputs]` of `f` at `x`.
pub fn finite_difference_jacobian<F>(f: F, x: &[f64], step: f64) -> Result<Tensor>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {step}")));
    }
    let n = x.len();
    let mut probe = x.to_vec();
    let mut columns = Vec::with_capacity(n);
    let mut m = None;
    for i in 0..n {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        if up.len() != down.len() || m.is_some_and(|m| m != up.len()) {
            return Err(Error::Shape("function output width changed".into()));
        }
        m = Some(up.len());
        let col: Vec<f64> = up
            .iter()
            .zip(&down)
            .map(|(a, b)| (a - b) / (2.0 * step))
            .collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "finite_difference",
                scope: format!("input coordinate {i}"),
            });
        }
        columns.push(col);
    }
    let m = m.unwrap_or_else(|| f(x).len());
    let mut jac = Tensor::zeros(&[m, n]);
    for (i, col) in columns.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            jac.data_mut()[r * n + i] = *v;
        }
    }
    Ok(jac)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise [`rel_err`] between two slices, normalized by the
/// larger of the two slices' max magnitudes.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}
