//! Relaxed structural-causal OT.
//!
//! The relaxed objective is `⟨C, π⟩ + ε KL(π ‖ π⊗)`, where `π⊗` is the product of
//! the plan's exogenous pair marginals. Because the model is an additive-noise SCM,
//! the cost in feature space is the separable exogenous cost conjugated by `g`, so
//! everything is solved on the grid of observed exogenous coordinate values and the
//! conjugations reduce to identities.
//!
//! `KL(π‖π⊗) = H(π) − Σ_i H_i(π)` with `H` the negative entropy, which splits the
//! objective into the convex part `⟨C,π⟩ + εH(π)` and the concave part `−ε Σ H_i`.
//! The difference-of-convex loop linearizes the concave part at the current plan and
//! solves the remaining entropic problem by multi-marginal Sinkhorn under the `2n`
//! per-axis marginal constraints.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::dist::{DiscreteDistribution, Marginal};
use crate::error::{Error, Result};
use crate::ot::plan::{add_along_axis, for_each_index, product_of_pairs};
use crate::ot::{
    exact_ot, factored_wasserstein, sinkhorn_multimarginal_log, sinkhorn_multimarginal_scaled, CostSpec,
    TransportPlan, EXACT_ATOM_CAP,
};
use crate::scm::{grid_cap, SampleMatrix, ScmModel, Space};

pub const DEFAULT_LOG_FLOOR: f64 = 1e-300;

/// Regularization, relative to the mean grid cost, at which the DC loop starts when
/// the requested `eps` is larger; see [`solve_relaxed`].
pub const ANNEAL_START: f64 = 1e-9;
const ANNEAL_RATIO: f64 = 10.0;

/// Regularization, relative to the mean grid cost, used in place of `eps = 0` when
/// the expanded instance is too large for the exact solver.
pub const SMALLEST_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxedSolveConfig {
    pub eps: f64,
    pub p: f64,
    /// Relative objective change that ends the DC loop.
    pub outer_tol: f64,
    pub outer_max: usize,
    /// L1 marginal tolerance of each Sinkhorn solve.
    pub inner_tol: f64,
    pub inner_max: usize,
    pub log_floor: f64,
}

impl Default for RelaxedSolveConfig {
    fn default() -> Self {
        RelaxedSolveConfig {
            eps: 1.0,
            p: 1.0,
            outer_tol: 1e-6,
            outer_max: 50,
            inner_tol: 1e-8,
            inner_max: 10_000,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

impl RelaxedSolveConfig {
    pub fn new(eps: f64, p: f64) -> Self {
        RelaxedSolveConfig {
            eps,
            p,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::invalid("eps", "must be finite and >= 0"));
        }
        CostSpec::new(self.p)?;
        for (name, v) in [
            ("outer_tol", self.outer_tol),
            ("inner_tol", self.inner_tol),
            ("log_floor", self.log_floor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, "must be finite and > 0"));
            }
        }
        if self.outer_max == 0 {
            return Err(Error::invalid("outer_max", "must be >= 1"));
        }
        if self.inner_max == 0 {
            return Err(Error::invalid("inner_max", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaxedSolveResult {
    #[serde(skip)]
    pub plan: TransportPlan,
    /// Per-axis dual potentials of the last Sinkhorn solve, in cost units.
    #[serde(skip)]
    pub potentials: Vec<Vec<f64>>,
    pub eps: f64,
    pub p: f64,
    pub distance: f64,
    pub transport_term: f64,
    pub kl_term: f64,
    pub objective: f64,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    /// Largest final L1 marginal residual over the Sinkhorn solves.
    pub inner_residual: f64,
    pub converged: bool,
    /// Objective of the starting plan of the last rung, then one value per accepted DC step.
    pub trace: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RelaxedSolveResult {
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                iterations: self.outer_iters,
                residual: self.inner_residual,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelaxedObjective {
    pub transport_term: f64,
    pub kl_term: f64,
    pub objective: f64,
}

/// `π⊗`: the product of the pair marginals, on the same grid and axes as `plan`.
pub fn pi_otimes(plan: &TransportPlan) -> TransportPlan {
    let mass = product_of_pairs(plan.shape(), &plan.pair_marginals());
    TransportPlan::from_parts(plan.axes().to_vec(), mass)
}

/// Transport term, `KL(π‖π⊗)` in its entropy form, and their `eps`-weighted sum.
pub fn relaxed_objective(plan: &TransportPlan, cost: &ArrayD<f64>, eps: f64) -> Result<RelaxedObjective> {
    if cost.shape() != plan.shape() {
        return Err(Error::DimensionMismatch {
            expected: plan.mass().len(),
            got: cost.len(),
        });
    }
    let transport_term = plan.transport_cost(cost);
    let kl_term = plan.entropy_report().kl_to_product;
    let objective = if eps == 0.0 {
        transport_term
    } else {
        transport_term + eps * kl_term
    };
    Ok(RelaxedObjective {
        transport_term,
        kl_term,
        objective,
    })
}

/// Gradient of `Σ_i H_i` at `plan`: `Σ_i (1 + log m_i(u_i, v_i))`, with marginal
/// values below [`DEFAULT_LOG_FLOOR`] clamped.
pub fn dc_gradient(plan: &TransportPlan) -> ArrayD<f64> {
    dc_gradient_floored(plan, DEFAULT_LOG_FLOOR)
}

pub fn dc_gradient_floored(plan: &TransportPlan, log_floor: f64) -> ArrayD<f64> {
    let logs: Vec<Array2<f64>> = plan
        .pair_marginals()
        .into_iter()
        .map(|m| m.mapv(|v| 1.0 + v.max(log_floor).ln()))
        .collect();
    pair_separable(plan.shape(), &logs)
}

fn add_potentials(t: &mut ArrayD<f64>, pots: &[Vec<f64>]) {
    let shape = t.shape().to_vec();
    let data = t.as_slice_mut().expect("standard layout");
    for (k, p) in pots.iter().enumerate() {
        add_along_axis(data, &shape, k, p);
    }
}

/// Tensor `T(x) = Σ_i t_i[x_i, x_{n+i}]`.
fn pair_separable(shape: &[usize], terms: &[Array2<f64>]) -> ArrayD<f64> {
    let n = terms.len();
    let mut data = vec![0.0; shape.iter().product()];
    for_each_index(shape, |idx, flat| {
        data[flat] = (0..n).map(|i| terms[i][[idx[i], idx[n + i]]]).sum();
    });
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

/// Both samples reduced to the exogenous grid: `2n` axis marginals and the cost tensor.
#[derive(Debug, Clone)]
pub struct ExogenousProblem {
    axes: Vec<Marginal>,
    cost: ArrayD<f64>,
    spec: CostSpec,
}

impl ExogenousProblem {
    /// Source axes first, then target axes, each given as a per-coordinate marginal.
    pub fn new(source: Vec<Marginal>, target: Vec<Marginal>, spec: CostSpec) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::CoordinateCountMismatch {
                left: source.len(),
                right: target.len(),
            });
        }
        if source.is_empty() {
            return Err(Error::invalid("source", "at least one coordinate is required"));
        }
        let cap = grid_cap();
        let atoms = source
            .iter()
            .chain(&target)
            .fold(1u128, |acc, m| acc.saturating_mul(m.len() as u128));
        if atoms > cap as u128 {
            return Err(Error::GridTooLarge { atoms, cap });
        }
        let pairs: Vec<Array2<f64>> = source
            .iter()
            .zip(&target)
            .map(|(a, b)| {
                Array2::from_shape_fn((a.len(), b.len()), |(x, y)| {
                    spec.pow(a.values()[x] - b.values()[y])
                })
            })
            .collect();
        let axes: Vec<Marginal> = source.into_iter().chain(target).collect();
        let shape: Vec<usize> = axes.iter().map(Marginal::len).collect();
        let cost = pair_separable(&shape, &pairs);
        Ok(ExogenousProblem { axes, cost, spec })
    }

    /// Pushes feature samples through `g⁻¹` (exogenous samples are taken as is) and
    /// builds the per-coordinate empirical marginals.
    pub fn from_samples(
        source: &SampleMatrix,
        target: &SampleMatrix,
        model: &ScmModel,
        spec: CostSpec,
    ) -> Result<Self> {
        let u = to_exogenous(source, model)?;
        let v = to_exogenous(target, model)?;
        ExogenousProblem::new(
            (0..u.dim()).map(|i| u.marginal(i)).collect(),
            (0..v.dim()).map(|i| v.marginal(i)).collect(),
            spec,
        )
    }

    pub fn n(&self) -> usize {
        self.axes.len() / 2
    }

    pub fn axes(&self) -> &[Marginal] {
        &self.axes
    }

    pub fn cost(&self) -> &ArrayD<f64> {
        &self.cost
    }

    pub fn spec(&self) -> CostSpec {
        self.spec
    }

    /// Unweighted mean of the grid cost tensor.
    pub fn mean_cost(&self) -> f64 {
        self.cost.mean().unwrap_or(0.0)
    }

    fn targets(&self) -> Vec<Vec<f64>> {
        self.axes.iter().map(|m| m.weights().to_vec()).collect()
    }

    /// Exact structural value `(Σ_i W_p(P̃_i, Q̃_i)^p)^(1/p)`.
    pub fn structural_exact(&self) -> f64 {
        let n = self.n();
        factored_wasserstein(&self.axes[..n], &self.axes[n..], self.spec.p).expect("equal halves")
    }

    /// The expanded product distributions of both sides.
    pub fn expanded(&self) -> Result<(DiscreteDistribution, DiscreteDistribution)> {
        let n = self.n();
        let cap = grid_cap();
        Ok((
            DiscreteDistribution::product(&self.axes[..n], cap)?,
            DiscreteDistribution::product(&self.axes[n..], cap)?,
        ))
    }
}

fn to_exogenous(s: &SampleMatrix, model: &ScmModel) -> Result<SampleMatrix> {
    match s.space() {
        Space::Feature => model.push_to_exogenous(s),
        Space::Exogenous => {
            if s.dim() != model.node_count() {
                return Err(Error::DimensionMismatch {
                    expected: model.node_count(),
                    got: s.dim(),
                });
            }
            Ok(s.clone())
        }
    }
}

/// Relaxed structural-causal distance between two samples.
///
/// The DC loop starts from the product of the `2n` axis marginals. A product start
/// is a fixed point of sorts: each DC step from a product plan returns a product
/// plan whose pair marginals are sharpened as if by an entropic step at `eps`, so
/// for large `eps` the loop creeps away from independence. The solve therefore
/// anneals: it starts at `min(eps, ANNEAL_START · mean cost)` and multiplies the
/// regularization by ten per rung until `eps`, warm-starting each rung from the last
/// plan. `trace` covers the final rung; `outer_iters` counts every rung.
///
/// `eps = 0` is solved by the exact LP on the expanded joints when both have at most
/// [`EXACT_ATOM_CAP`] atoms, and otherwise at `SMALLEST_EPS · mean cost` with a warning.
pub fn solve_relaxed(
    source: &SampleMatrix,
    target: &SampleMatrix,
    model: &ScmModel,
    cost: &CostSpec,
    cfg: &RelaxedSolveConfig,
) -> Result<RelaxedSolveResult> {
    check_p(cost, cfg)?;
    cfg.validate()?;
    let problem = ExogenousProblem::from_samples(source, target, model, *cost)?;
    solve_problem(&problem, cfg, None)
}

fn check_p(cost: &CostSpec, cfg: &RelaxedSolveConfig) -> Result<()> {
    if cost.p != cfg.p {
        return Err(Error::invalid(
            "p",
            format!("cost exponent {} differs from config exponent {}", cost.p, cfg.p),
        ));
    }
    Ok(())
}

/// Solves on a prepared grid, optionally continuing from a previous plan of the same shape.
pub fn solve_problem(
    problem: &ExogenousProblem,
    cfg: &RelaxedSolveConfig,
    warm: Option<&RelaxedSolveResult>,
) -> Result<RelaxedSolveResult> {
    cfg.validate()?;
    let mut warnings = vec![];
    let mean = problem.mean_cost();
    let mut eps = cfg.eps;
    if eps == 0.0 {
        let (a, b) = problem.expanded()?;
        if a.len() <= EXACT_ATOM_CAP && b.len() <= EXACT_ATOM_CAP {
            return solve_exact(problem, &a, &b, cfg);
        }
        eps = SMALLEST_EPS * mean.max(f64::MIN_POSITIVE);
        warnings.push(format!(
            "eps = 0 exceeds the exact solver's size limit; solved at eps = {eps:e}"
        ));
    }
    if mean == 0.0 {
        // Every cost is zero: the independent coupling is optimal with zero KL.
        let plan = TransportPlan::independent(problem.axes.clone())?;
        return finish(problem, cfg, eps, plan, vec![0.0], 0, 0, 0.0, true, warnings, vec![]);
    }

    let mut ladder = vec![];
    if warm.is_none() {
        let mut e = (ANNEAL_START * mean).min(eps);
        while e < eps / ANNEAL_RATIO * (1.0 + 1e-12) {
            ladder.push(e);
            e *= ANNEAL_RATIO;
        }
    }
    ladder.push(eps);

    let mut plan = match warm {
        Some(w) => {
            let p = &w.plan;
            if p.shape() != problem.cost.shape() {
                return Err(Error::DimensionMismatch {
                    expected: problem.cost.len(),
                    got: p.mass().len(),
                });
            }
            TransportPlan::from_parts(problem.axes.clone(), p.mass().clone())
        }
        None => TransportPlan::independent(problem.axes.clone())?,
    };
    let targets = problem.targets();
    let mut outer = 0;
    let mut inner = 0;
    let mut residual: f64 = 0.0;
    let mut trace = vec![];
    let mut converged = false;
    let mut inner_ok = true;
    // Potentials of the last Sinkhorn solve, in cost units.
    let mut phi: Option<Vec<Vec<f64>>> = warm.map(|w| w.potentials.clone()).filter(|p| !p.is_empty());
    for &e in &ladder {
        let mut prev = relaxed_objective(&plan, &problem.cost, e)?.objective;
        trace = vec![prev];
        converged = false;
        for _ in 0..cfg.outer_max {
            outer += 1;
            let g = dc_gradient_floored(&plan, cfg.log_floor);
            let (sol, base) = match &phi {
                None => {
                    // The product start carries no transport information; the
                    // regularization ladder inside the scaled solver does the sharpening.
                    let c_eff = &problem.cost - &(g * e);
                    let sol = sinkhorn_multimarginal_scaled(&c_eff, &targets, e, cfg.inner_tol, cfg.inner_max)?;
                    (sol, None)
                }
                Some(phi) => {
                    // Warm start: the last potentials, rescaled to this regularization.
                    let f0: Vec<Vec<f64>> = phi.iter().map(|p| p.iter().map(|v| v / e).collect()).collect();
                    let mut log_kernel = g - &(&problem.cost / e);
                    add_potentials(&mut log_kernel, &f0);
                    let sol = sinkhorn_multimarginal_log(log_kernel, &targets, cfg.inner_tol, cfg.inner_max)?;
                    (sol, Some(f0))
                }
            };
            let mut f = sol.log_potentials.clone();
            if let Some(f0) = base {
                for (a, b) in f.iter_mut().zip(&f0) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
            }
            phi = Some(
                f.iter()
                    .map(|p| p.iter().map(|v| if v.is_finite() { v * e } else { 0.0 }).collect())
                    .collect(),
            );
            inner += sol.iterations;
            residual = residual.max(sol.residual);
            inner_ok &= sol.converged;
            let next = TransportPlan::from_parts(problem.axes.clone(), sol.plan);
            let value = relaxed_objective(&next, &problem.cost, e)?.objective;
            if value > prev {
                // Inexact subproblem solutions can break descent at round-off level;
                // the last accepted plan is kept.
                converged = true;
                break;
            }
            plan = next;
            trace.push(value);
            let change = (prev - value) / prev.abs().max(f64::MIN_POSITIVE);
            prev = value;
            if change < cfg.outer_tol {
                converged = true;
                break;
            }
        }
    }
    if !inner_ok {
        warnings.push(format!("a Sinkhorn solve stopped at residual {residual:e}"));
    }
    finish(
        problem,
        cfg,
        eps,
        plan,
        trace,
        outer,
        inner,
        residual,
        converged && inner_ok,
        warnings,
        phi.unwrap_or_default(),
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &ExogenousProblem,
    cfg: &RelaxedSolveConfig,
    eps: f64,
    plan: TransportPlan,
    trace: Vec<f64>,
    outer_iters: usize,
    inner_iters_total: usize,
    inner_residual: f64,
    converged: bool,
    warnings: Vec<String>,
    potentials: Vec<Vec<f64>>,
) -> Result<RelaxedSolveResult> {
    let obj = relaxed_objective(&plan, &problem.cost, eps)?;
    Ok(RelaxedSolveResult {
        plan,
        potentials,
        eps,
        p: cfg.p,
        distance: problem.spec.root(obj.objective.max(0.0)),
        transport_term: obj.transport_term,
        kl_term: obj.kl_term,
        objective: obj.objective,
        outer_iters,
        inner_iters_total,
        inner_residual,
        converged,
        trace,
        warnings,
    })
}

fn solve_exact(
    problem: &ExogenousProblem,
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    cfg: &RelaxedSolveConfig,
) -> Result<RelaxedSolveResult> {
    let lp = exact_ot(a, b, &problem.spec)?;
    // Product atoms are enumerated row-major, so the plan matrix is the grid tensor.
    let shape = problem.cost.shape().to_vec();
    let mass = ArrayD::from_shape_vec(IxDyn(&shape), lp.plan.iter().map(|v| v.max(0.0)).collect())
        .expect("expanded sizes match the grid");
    let plan = TransportPlan::from_parts(problem.axes.clone(), mass);
    let objective = relaxed_objective(&plan, &problem.cost, 0.0)?.objective;
    finish(problem, cfg, 0.0, plan, vec![objective], 0, 0, 0.0, true, vec![], vec![])
}

/// `W^F` for inputs read through their exogenous product reconstructions.
pub fn structural_wasserstein_exact(
    source: &SampleMatrix,
    target: &SampleMatrix,
    model: &ScmModel,
    cost: &CostSpec,
) -> Result<f64> {
    let u = to_exogenous(source, model)?;
    let v = to_exogenous(target, model)?;
    let a: Vec<Marginal> = (0..u.dim()).map(|i| u.marginal(i)).collect();
    let b: Vec<Marginal> = (0..v.dim()).map(|i| v.marginal(i)).collect();
    factored_wasserstein(&a, &b, cost.p)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub eps: f64,
    pub distance: f64,
    pub kl_term: f64,
    pub transport_term: f64,
    pub converged: bool,
}

/// Solves at each `eps` in ascending order, each solve continuing from the plan of
/// the previous one.
pub fn epsilon_sweep(
    source: &SampleMatrix,
    target: &SampleMatrix,
    model: &ScmModel,
    cost: &CostSpec,
    eps_list: &[f64],
    cfg: &RelaxedSolveConfig,
) -> Result<Vec<SweepPoint>> {
    check_p(cost, cfg)?;
    let problem = ExogenousProblem::from_samples(source, target, model, *cost)?;
    sweep_problem(&problem, eps_list, cfg)
}

pub fn sweep_problem(
    problem: &ExogenousProblem,
    eps_list: &[f64],
    cfg: &RelaxedSolveConfig,
) -> Result<Vec<SweepPoint>> {
    if eps_list.is_empty() {
        return Err(Error::invalid("eps_list", "must be nonempty"));
    }
    if eps_list.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::invalid("eps_list", "must be strictly ascending"));
    }
    let mut out = Vec::with_capacity(eps_list.len());
    let mut last: Option<RelaxedSolveResult> = None;
    for &eps in eps_list {
        let c = RelaxedSolveConfig { eps, ..cfg.clone() };
        let warm = last.as_ref().filter(|_| eps > 0.0);
        let r = solve_problem(problem, &c, warm)?;
        out.push(SweepPoint {
            eps: r.eps,
            distance: r.distance,
            kl_term: r.kl_term,
            transport_term: r.transport_term,
            converged: r.converged,
        });
        last = Some(r);
    }
    Ok(out)
}
