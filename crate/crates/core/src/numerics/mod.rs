//! Dense linear algebra, stable nonlinearities, seeded randomness and the
//! central-difference gradient oracle.

mod linalg;
mod rng;

pub use linalg::{axpy, dot, norm, scale, sub, Mat64, Vec64};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Norm below which a vector is treated as degenerate by [`cosine_sim`].
pub const EPS_NORM: f64 = 1e-12;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Floor on the denominator of [`rel_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `log Σ exp(x_k)` with max-shift.
pub fn stable_logsumexp(xs: &[f64]) -> Result<f64> {
    let max = xs
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or(Error::EmptyReduction)?;
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "cosine operand",
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    for n in [na, nb] {
        if n < EPS_NORM {
            return Err(Error::DegenerateVector {
                norm: n,
                eps: EPS_NORM,
            });
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit vector along `a` together with its original norm.
pub fn l2_normalize(a: &[f64]) -> Result<(Vec64, f64)> {
    let n = norm(a);
    if n < EPS_NORM {
        return Err(Error::DegenerateVector {
            norm: n,
            eps: EPS_NORM,
        });
    }
    Ok((a.iter().map(|x| x / n).collect(), n))
}

/// Pulls a gradient w.r.t. a unit vector `u = a/‖a‖` back to `a`.
pub fn normalize_backward(unit: &[f64], norm_a: f64, d_unit: &[f64]) -> Vec64 {
    let proj = dot(d_unit, unit);
    d_unit
        .iter()
        .zip(unit)
        .map(|(g, u)| (g - proj * u) / norm_a)
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability vector; sums to one within rounding.
pub fn softmax(xs: &[f64]) -> Vec64 {
    if xs.is_empty() {
        return Vec::new();
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let fp = f(&probe);
        probe[k] = orig - h;
        let fm = f(&probe);
        probe[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation { coord: k });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
#[inline]
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Largest coordinate-wise [`rel_error`] between two gradients.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| rel_error(*a, *b))
        .fold(0.0, f64::max)
}
