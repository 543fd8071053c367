//! Entropic OT by Sinkhorn scaling, for two marginals and for grid tensors.
//!
//! Both solvers run entirely in the log domain, so small regularizations do
//! not underflow the Gibbs kernel. The multi-marginal solver applies, for each
//! axis `i` in turn, the update
//! `φ_i(x_i) ← P_i(x_i) / Σ_{x_{−i}} K(x) Π_{j≠i} φ_j(x_j)` with `K = exp(−C/ε)`.
//! Its log-domain form is a shift of the log plan along axis `i` by
//! `log P_i − log(current axis-i marginal)`.
//!
//! Running out of iterations is not an error: results carry the final residual and
//! a `converged` flag, and [`SinkhornResult::require_converged`] turns that into
//! [`Error::NonConvergence`] for callers that need it.

use ndarray::{Array2, ArrayD, IxDyn};

use super::cost::{cost_matrix, CostSpec};
use super::plan::{add_along_axis, axis_logsumexp, for_each_index};
use crate::dist::DiscreteDistribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub plan: Array2<f64>,
    /// Transport term `⟨C, π⟩`.
    pub objective: f64,
    /// Largest L1 marginal violation over the two sides.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SinkhornResult {
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiSinkhornResult {
    pub plan: ArrayD<f64>,
    /// Largest L1 violation over all axis marginals.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accumulated per-axis log scalings; the plan is `K(x) · exp(Σ_k f_k(x_k))`.
    pub log_potentials: Vec<Vec<f64>>,
}

impl MultiSinkhornResult {
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid("eps", format!("regularization must be > 0, got {eps}")));
    }
    Ok(())
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Potential shift that makes a marginal with log mass `current` match `target`.
#[inline]
fn shift(target: f64, current: f64) -> f64 {
    if target <= 0.0 {
        if current == f64::NEG_INFINITY {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else if current == f64::NEG_INFINITY {
        // No kernel support on this value; nothing can be rescaled.
        0.0
    } else {
        target.ln() - current
    }
}

/// Entropic OT between two distributions under `cost`.
pub fn sinkhorn(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    cost: &CostSpec,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornResult> {
    let c = cost_matrix(a, b, cost)?;
    sinkhorn_matrix(a.weights(), b.weights(), &c, eps, tol, max_iter)
}

/// Entropic OT for a cost matrix `c` (entries are already `c^p`).
pub fn sinkhorn_matrix(
    a: &[f64],
    b: &[f64],
    c: &Array2<f64>,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornResult> {
    check_eps(eps)?;
    let (m, n) = (a.len(), b.len());
    if c.dim() != (m, n) {
        return Err(Error::DimensionMismatch {
            expected: m * n,
            got: c.len(),
        });
    }
    let log_k = c.mapv(|v| -v / eps);
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..m {
            let cur = logsumexp((0..n).map(|j| log_k[[i, j]] + f[i] + g[j]));
            f[i] += shift(a[i], cur);
        }
        for j in 0..n {
            let cur = logsumexp((0..m).map(|i| log_k[[i, j]] + f[i] + g[j]));
            g[j] += shift(b[j], cur);
        }
        let plan = Array2::from_shape_fn((m, n), |(i, j)| (log_k[[i, j]] + f[i] + g[j]).exp());
        residual = marginal_residual(&plan, a, b);
        if residual <= tol {
            break;
        }
    }
    let plan = Array2::from_shape_fn((m, n), |(i, j)| (log_k[[i, j]] + f[i] + g[j]).exp());
    let objective = (&plan * c).sum();
    Ok(SinkhornResult {
        plan,
        objective,
        residual,
        iterations,
        converged: residual <= tol,
    })
}

fn marginal_residual(plan: &Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
    let rows: f64 = plan
        .rows()
        .into_iter()
        .zip(a)
        .map(|(r, w)| (r.sum() - w).abs())
        .sum();
    let cols: f64 = plan
        .columns()
        .into_iter()
        .zip(b)
        .map(|(c, w)| (c.sum() - w).abs())
        .sum();
    rows.max(cols)
}

/// Entropic multi-marginal OT: fits `exp(−C/ε)` scaled by per-axis potentials to the
/// given axis marginals.
pub fn sinkhorn_multimarginal(
    cost: &ArrayD<f64>,
    marginals: &[Vec<f64>],
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<MultiSinkhornResult> {
    check_eps(eps)?;
    sinkhorn_multimarginal_log(cost.mapv(|v| -v / eps), marginals, tol, max_iter)
}

/// Multi-marginal scaling of an arbitrary log kernel (for instance `−C/ε + G`).
pub fn sinkhorn_multimarginal_log(
    log_kernel: ArrayD<f64>,
    marginals: &[Vec<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<MultiSinkhornResult> {
    let shape = log_kernel.shape().to_vec();
    check_marginals(&shape, marginals)?;
    let mut logp = into_vec(log_kernel);
    let mut pots: Vec<Vec<f64>> = shape.iter().map(|&s| vec![0.0; s]).collect();
    let (residual, iterations) = scale_in_place(&mut logp, &shape, marginals, &mut pots, tol, max_iter);
    Ok(finish(logp, &shape, residual, iterations, tol, pots))
}

/// Multi-marginal Sinkhorn for `cost` at regularization `eps`, reached through a
/// geometric ladder of larger regularizations whose potentials warm-start the next
/// rung. Plain scaling needs on the order of `1/eps` sweeps; the ladder keeps small
/// `eps` tractable. `max_iter` bounds the sweeps summed over all rungs.
///
/// Intermediate rungs run a fixed handful of sweeps, so this pays off for small
/// `eps`; at moderate `eps` it behaves like [`sinkhorn_multimarginal`].
pub fn sinkhorn_multimarginal_scaled(
    cost: &ArrayD<f64>,
    marginals: &[Vec<f64>],
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<MultiSinkhornResult> {
    check_eps(eps)?;
    let shape = cost.shape().to_vec();
    check_marginals(&shape, marginals)?;
    let c = cost.as_standard_layout();
    let c = c.as_slice().expect("standard layout");
    let (lo, hi) = c
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let spread = if hi > lo { hi - lo } else { 0.0 };
    let mut ladder = vec![];
    let mut eta = spread.max(eps);
    while eta > eps {
        ladder.push(eta);
        eta *= LADDER_RATIO;
    }
    ladder.push(eps);

    // Potentials in cost units carry over between rungs.
    let mut phi: Vec<Vec<f64>> = shape.iter().map(|&s| vec![0.0; s]).collect();
    let mut logp = vec![0.0; c.len()];
    let mut total = 0;
    let mut residual = f64::INFINITY;
    let mut pots = phi.clone();
    for (r, &eta) in ladder.iter().enumerate() {
        let last = r + 1 == ladder.len();
        for_each_index(&shape, |idx, flat| {
            let s: f64 = idx.iter().zip(&phi).map(|(&x, p)| p[x]).sum();
            logp[flat] = (s - c[flat]) / eta;
        });
        pots = phi.iter().map(|p| p.iter().map(|v| v / eta).collect()).collect();
        let (rung_tol, budget) = if last {
            (tol, max_iter - total)
        } else {
            (tol.max(RUNG_TOL), RUNG_SWEEPS.min(max_iter - total))
        };
        let (res, it) = scale_in_place(&mut logp, &shape, marginals, &mut pots, rung_tol, budget);
        total += it;
        residual = res;
        for (p, q) in phi.iter_mut().zip(&pots) {
            for (a, b) in p.iter_mut().zip(q) {
                // Axis values without kernel support keep a −∞ shift; park them at 0.
                *a = if b.is_finite() { b * eta } else { 0.0 };
            }
        }
        if total >= max_iter && !(last && residual <= tol) {
            break;
        }
    }
    Ok(finish(logp, &shape, residual, total, tol, pots))
}

const LADDER_RATIO: f64 = 0.5;
/// Intermediate rungs stop at a loose residual or a sweep cap. Converging them
/// tightly is wasted effort: at moderate regularization, mass moves between weakly
/// linked blocks of the kernel very slowly, while rough potentials already make the
/// next rung cheap.
const RUNG_TOL: f64 = 1e-3;
const RUNG_SWEEPS: usize = 2000;

fn check_marginals(shape: &[usize], marginals: &[Vec<f64>]) -> Result<()> {
    if marginals.len() != shape.len() {
        return Err(Error::CoordinateCountMismatch {
            left: shape.len(),
            right: marginals.len(),
        });
    }
    for (k, (m, &s)) in marginals.iter().zip(shape).enumerate() {
        if m.len() != s {
            return Err(Error::invalid(
                format!("marginals[{k}]"),
                format!("expected {s} entries, got {}", m.len()),
            ));
        }
    }
    Ok(())
}

fn into_vec(a: ArrayD<f64>) -> Vec<f64> {
    a.as_standard_layout().into_owned().into_raw_vec_and_offset().0
}

fn finish(
    logp: Vec<f64>,
    shape: &[usize],
    residual: f64,
    iterations: usize,
    tol: f64,
    log_potentials: Vec<Vec<f64>>,
) -> MultiSinkhornResult {
    let plan: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    MultiSinkhornResult {
        plan: ArrayD::from_shape_vec(IxDyn(shape), plan).expect("shape matches data"),
        residual,
        iterations,
        converged: residual <= tol,
        log_potentials,
    }
}

/// Sweeps over the axes until the L1 marginal residual drops to `tol`. Each axis
/// update shifts the log plan by the log-ratio of target to current marginal; the
/// shifts accumulate into `pots`. Returns the residual and the sweep count.
///
/// When plain sweeps contract slowly (rate `r` close to 1, typical of small
/// regularization where a few tiny entries carry all the exchange between blocks),
/// the shifts are over-relaxed by `ω = 2 / (1 + √(1 − r))`. If the error then blows
/// up, the solve falls back to plain sweeps for good.
fn scale_in_place(
    logp: &mut [f64],
    shape: &[usize],
    marginals: &[Vec<f64>],
    pots: &mut [Vec<f64>],
    tol: f64,
    max_iter: usize,
) -> (f64, usize) {
    let mut iterations = 0;
    let mut residual = log_residual(logp, shape, marginals);
    let mut omega = 1.0;
    let mut relax = Relaxation::default();
    while residual > tol && iterations < max_iter {
        iterations += 1;
        // Pre-update errors come for free and trigger the exact check.
        let mut seen = 0.0f64;
        for (k, target) in marginals.iter().enumerate() {
            let current = axis_logsumexp(logp, shape, k);
            let mut err = 0.0;
            let delta: Vec<f64> = target
                .iter()
                .zip(&current)
                .map(|(&t, &c)| {
                    err += (c.exp() - t).abs();
                    let d = shift(t, c);
                    if d.is_finite() {
                        omega * d
                    } else {
                        d
                    }
                })
                .collect();
            seen = seen.max(err);
            add_along_axis(logp, shape, k, &delta);
            for (p, d) in pots[k].iter_mut().zip(&delta) {
                *p += d;
            }
        }
        if seen <= tol || iterations == max_iter {
            residual = log_residual(logp, shape, marginals);
        }
        omega = relax.update(seen);
    }
    (residual, iterations)
}

const RATE_WINDOW: usize = 10;
const OMEGA_MAX: f64 = 1.95;

#[derive(Default)]
struct Relaxation {
    history: Vec<f64>,
    omega: Option<f64>,
    best: f64,
    disabled: bool,
}

impl Relaxation {
    /// Records a sweep's error and returns the factor for the next sweep.
    fn update(&mut self, seen: f64) -> f64 {
        if self.disabled {
            return 1.0;
        }
        if let Some(w) = self.omega {
            if !seen.is_finite() || seen > DIVERGENCE * self.best {
                self.disabled = true;
                return 1.0;
            }
            self.best = self.best.min(seen);
            return w;
        }
        self.history.push(seen);
        let n = self.history.len();
        if n > RATE_WINDOW {
            let old = self.history[n - 1 - RATE_WINDOW];
            if old > 0.0 && seen > 0.0 {
                let r = (seen / old).powf(1.0 / RATE_WINDOW as f64);
                if (SLOW_RATE..1.0).contains(&r) {
                    let w = (2.0 / (1.0 + (1.0 - r).sqrt())).min(OMEGA_MAX);
                    self.omega = Some(w);
                    self.best = seen;
                    return w;
                }
            }
        }
        1.0
    }
}

const SLOW_RATE: f64 = 0.5;
const DIVERGENCE: f64 = 10.0;

fn log_residual(logp: &[f64], shape: &[usize], marginals: &[Vec<f64>]) -> f64 {
    (0..shape.len())
        .map(|k| {
            axis_logsumexp(logp, shape, k)
                .iter()
                .zip(&marginals[k])
                .map(|(l, t)| (l.exp() - t).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}
