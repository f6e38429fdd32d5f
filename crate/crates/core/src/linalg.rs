//! Small dense-vector helpers shared by the numerical modules.

use crate::error::{Result, VmfError};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v *= alpha);
}

/// Returns `x / ||x||`, rejecting zero and non-finite vectors.
pub fn normalized(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(VmfError::domain("vector has non-finite entries"));
    }
    let n = norm(x);
    if n == 0.0 {
        return Err(VmfError::domain("cannot normalize a zero vector"));
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Removes the component of `g` along the unit vector `u`.
pub fn tangent_project(g: &[f64], u: &[f64]) -> Vec<f64> {
    let along = dot(g, u);
    g.iter().zip(u).map(|(gi, ui)| gi - along * ui).collect()
}

/// Numerically stable `log(sum(exp(v)))`. Returns `-inf` when every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
