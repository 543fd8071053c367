use crate::dist::Marginal;
use crate::error::{Error, Result};

use super::cost::CostSpec;

/// `W_p(a, b)^p` by the monotone coupling: both quantile functions are walked
/// over the common refinement of their weight partitions.
pub fn wasserstein_1d_pow(a: &Marginal, b: &Marginal, p: f64) -> f64 {
    let cost = CostSpec { p };
    let (va, wa) = (a.values(), a.weights());
    let (vb, wb) = (b.values(), b.weights());
    if va.is_empty() || vb.is_empty() {
        return 0.0;
    }
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (wa[0], wb[0]);
    let mut total = 0.0;
    // One side is exhausted exactly at every step; rounding dust left on the
    // other side after the final atom is dropped.
    while i < va.len() && j < vb.len() {
        let mass = ra.min(rb);
        total += mass * cost.pow(va[i] - vb[j]);
        ra -= mass;
        rb -= mass;
        if ra <= 0.0 {
            i += 1;
            if i < va.len() {
                ra = wa[i];
            }
        }
        if rb <= 0.0 {
            j += 1;
            if j < vb.len() {
                rb = wb[j];
            }
        }
    }
    total
}

/// `W_p(a, b)` between two 1-D distributions.
pub fn wasserstein_1d(a: &Marginal, b: &Marginal, p: f64) -> f64 {
    CostSpec { p }.root(wasserstein_1d_pow(a, b, p))
}

/// `Σ_i W_p(a_i, b_i)^p` for product measures given by their coordinate marginals.
pub fn factored_wasserstein_pow(a: &[Marginal], b: &[Marginal], p: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::CoordinateCountMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| wasserstein_1d_pow(x, y, p)).sum())
}

/// `(Σ_i W_p(a_i, b_i)^p)^(1/p)`: OT between two product measures under a separable cost.
pub fn factored_wasserstein(a: &[Marginal], b: &[Marginal], p: f64) -> Result<f64> {
    Ok(CostSpec { p }.root(factored_wasserstein_pow(a, b, p)?))
}
