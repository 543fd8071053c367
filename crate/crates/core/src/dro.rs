//! Ambiguity sets around an empirical distribution.
//!
//! Concentration radii for classical and structural balls, Monte-Carlo
//! explorers for three ball families, worst-case expected losses over the
//! explored draws, and the sample-size rate experiment.
//!
//! Every ball is explored in exogenous coordinates under the separable cost
//! `Σ |u_i − v_i|^p`. Each draw is indexed, and its randomness comes from a
//! ChaCha stream keyed by `(seed, index)`, so draws are order independent.

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dist::{DiscreteDistribution, Marginal};
use crate::error::{Error, Result};
use crate::ot::{assignment, wasserstein_1d, CostSpec};
use crate::relaxed::structural_wasserstein_exact;
use crate::scm::{Equation, Noise, SampleMatrix, ScmModel, Space, TabulatedMap};

/// Inputs of the concentration radii.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiusParams {
    /// Sample count `N`.
    #[serde(rename = "N")]
    pub n_samples: usize,
    /// Confidence parameter in `(0, 1]`.
    pub eps_conf: f64,
    pub p: f64,
    /// Ambient dimension.
    pub d: usize,
    /// Largest exogenous block dimension.
    pub d_star: usize,
    /// Support radius.
    pub rho: f64,
    #[serde(rename = "C_const")]
    pub c_big: f64,
    #[serde(rename = "c_const")]
    pub c_small: f64,
    pub n_blocks: usize,
}

impl Default for RadiusParams {
    fn default() -> Self {
        RadiusParams {
            n_samples: 100,
            eps_conf: 0.05,
            p: 1.0,
            d: 2,
            d_star: 1,
            rho: 1.0,
            c_big: 1.0,
            c_small: 1.0,
            n_blocks: 2,
        }
    }
}

impl RadiusParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("N", "must be at least 1"));
        }
        if !(self.eps_conf > 0.0 && self.eps_conf <= 1.0) {
            return Err(Error::invalid("eps_conf", "must lie in (0, 1]"));
        }
        if !(self.p.is_finite() && self.p >= 1.0) {
            return Err(Error::invalid("p", "must be a finite value >= 1"));
        }
        for (name, v) in [("d", self.d), ("d_star", self.d_star), ("n_blocks", self.n_blocks)] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        for (name, v) in [("rho", self.rho), ("C_const", self.c_big), ("c_const", self.c_small)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, "must be finite and positive"));
            }
        }
        Ok(())
    }
}

/// `h(x) = x² / ln(2 + 1/x)²`, increasing on `x > 0`.
fn h(x: f64) -> f64 {
    let l = (2.0 + 1.0 / x).ln();
    x * x / (l * l)
}

/// Solves `h(x) = y` for `y > 0` by bisection.
fn h_inverse(y: f64) -> f64 {
    let mut hi = 1.0;
    while h(hi) < y {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-12 * hi.max(1e-300) && hi - lo > 1e-300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Radius of a classical Wasserstein ball holding the true law with
/// probability `1 − eps_conf`. The case is chosen by comparing `2p` with `d`.
/// A nonpositive log term (for instance `eps_conf = 1` with `C = 1`) gives 0.
pub fn radius_upper(params: &RadiusParams) -> Result<f64> {
    params.validate()?;
    let log_term = (params.c_big / params.eps_conf).ln() / params.c_small;
    if log_term <= 0.0 {
        return Ok(0.0);
    }
    let n = params.n_samples as f64;
    let (p, d) = (params.p, params.d as f64);
    let value = if 2.0 * p > d {
        (log_term / n).powf(1.0 / (2.0 * p)) * params.rho
    } else if 2.0 * p < d {
        (log_term / n).powf(1.0 / d) * params.rho
    } else {
        h_inverse(log_term / n).powf(1.0 / p) * params.rho
    };
    Ok(value)
}

/// Radius of a structural ball built from the product of exogenous marginals:
/// `n · C · (N ln(C n / eps_conf))^(−1/max(d*, 2p))`.
///
/// A nonpositive log term makes the bound vacuous and returns infinity.
pub fn radius_factored(params: &RadiusParams) -> Result<f64> {
    params.validate()?;
    let nb = params.n_blocks as f64;
    let log_term = (params.c_big * nb / params.eps_conf).ln();
    if log_term <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let rate = (params.d_star as f64).max(2.0 * params.p);
    Ok(nb * params.c_big * (params.n_samples as f64 * log_term).powf(-1.0 / rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallKind {
    Classical,
    Structural,
    GcausalMc,
}

impl BallKind {
    pub fn name(self) -> &'static str {
        match self {
            BallKind::Classical => "classical",
            BallKind::Structural => "structural",
            BallKind::GcausalMc => "gcausal_mc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbiguityConfig {
    pub kind: BallKind,
    pub delta: f64,
    #[serde(default = "default_mc_count")]
    pub mc_count: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mc_count() -> usize {
    10_000
}

impl AmbiguityConfig {
    pub fn new(kind: BallKind, delta: f64, seed: u64) -> Self {
        AmbiguityConfig {
            kind,
            delta,
            mc_count: default_mc_count(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::invalid("delta", "must be finite and >= 0"));
        }
        if self.mc_count == 0 {
            return Err(Error::invalid("mc_count", "must be at least 1"));
        }
        Ok(())
    }

    fn expect_kind(&self, kind: BallKind) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return Err(Error::invalid(
                "kind",
                format!("expected `{}`, got `{}`", kind.name(), self.kind.name()),
            ));
        }
        Ok(())
    }
}

/// Loss `ψ` integrated against each explored distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum LossFunction {
    /// `|x − y|`
    AbsDiff,
    /// `(x − y)²`
    SqDiff,
    /// `|x + y|`
    AbsSum,
    /// `(x + y)²`
    SqSum,
    /// `x² + y²`
    SumSq,
    /// Multilinear interpolation of a table over the feature vector.
    Tabulated(TabulatedMap),
}

impl LossFunction {
    /// The five pairwise losses, in table order.
    pub fn pairwise() -> [LossFunction; 5] {
        use LossFunction::*;
        [AbsDiff, SqDiff, AbsSum, SqSum, SumSq]
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossFunction::AbsDiff => "abs_diff",
            LossFunction::SqDiff => "sq_diff",
            LossFunction::AbsSum => "abs_sum",
            LossFunction::SqSum => "sq_sum",
            LossFunction::SumSq => "sumsq",
            LossFunction::Tabulated(_) => "tabulated",
        }
    }

    /// Parses one of the pairwise names.
    pub fn from_name(name: &str) -> Result<Self> {
        LossFunction::pairwise()
            .into_iter()
            .find(|l| l.name() == name)
            .ok_or_else(|| {
                Error::invalid(
                    "psi",
                    format!("unknown loss `{name}`; expected abs_diff, sq_diff, abs_sum, sq_sum or sumsq"),
                )
            })
    }

    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        if let LossFunction::Tabulated(t) = self {
            return t.eval(y).ok_or_else(|| {
                Error::DomainViolation(format!("loss table does not cover {y:?}"))
            });
        }
        if y.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: y.len(),
            });
        }
        let (a, b) = (y[0], y[1]);
        Ok(match self {
            LossFunction::AbsDiff => (a - b).abs(),
            LossFunction::SqDiff => (a - b) * (a - b),
            LossFunction::AbsSum => (a + b).abs(),
            LossFunction::SqSum => (a + b) * (a + b),
            LossFunction::SumSq => a * a + b * b,
            LossFunction::Tabulated(_) => unreachable!(),
        })
    }

    /// `E_q[ψ]`.
    pub fn expectation(&self, q: &DiscreteDistribution) -> Result<f64> {
        let mut total = 0.0;
        for (atom, w) in q.atoms().outer_iter().zip(q.weights()) {
            total += w * self.eval(atom.as_slice().expect("rows are contiguous"))?;
        }
        Ok(total)
    }
}

fn draw_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `(Σ_k w_k Σ_i |Δ_ki|^p)^(1/p)` for a displacement field stored row by row.
fn field_norm(field: &[f64], weights: &[f64], dim: usize, cost: &CostSpec) -> f64 {
    let total: f64 = field
        .chunks(dim)
        .zip(weights)
        .map(|(row, w)| w * row.iter().map(|v| cost.pow(v.abs())).sum::<f64>())
        .sum();
    cost.root(total)
}

/// Mixes a unit affine field with a unit jitter field and rescales the result
/// to cost exactly `radius`. The jitter share is uniform on `[0, 1]`.
fn blend_to_radius<R: Rng>(
    rng: &mut R,
    mut affine: Vec<f64>,
    mut jitter: Vec<f64>,
    weights: &[f64],
    dim: usize,
    cost: &CostSpec,
    radius: f64,
) -> Vec<f64> {
    if radius == 0.0 {
        return vec![0.0; affine.len()];
    }
    let share: f64 = rng.random();
    for (field, mix) in [(&mut affine, (1.0 - share).sqrt()), (&mut jitter, share.sqrt())] {
        let norm = field_norm(field, weights, dim, cost);
        let k = if norm > 0.0 { mix / norm } else { 0.0 };
        field.iter_mut().for_each(|v| *v *= k);
    }
    let mut field: Vec<f64> = affine.iter().zip(&jitter).map(|(a, b)| a + b).collect();
    let norm = field_norm(&field, weights, dim, cost);
    let k = if norm > 0.0 { radius / norm } else { 0.0 };
    field.iter_mut().for_each(|v| *v *= k);
    field
}

/// Weighted mean and standard deviation per column (unit scale for constant columns).
fn standardization(atoms: &Array2<f64>, weights: &[f64]) -> Vec<(f64, f64)> {
    atoms
        .columns()
        .into_iter()
        .map(|col| {
            let mean: f64 = col.iter().zip(weights).map(|(x, w)| w * x).sum();
            let var: f64 = col.iter().zip(weights).map(|(x, w)| w * (x - mean).powi(2)).sum();
            let sd = var.sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        })
        .collect()
}

/// Explorer of a classical ball `{Q : W(base, Q) ≤ δ}`.
///
/// Draw `k` moves every atom by `Δ_k = b + M z_k + J_k`, with `z_k` the
/// standardized atom, Gaussian `b`, `M` and per-atom jitter `J_k`, and then
/// rescales the field so that its displacement coupling costs exactly `δ`.
#[derive(Debug, Clone)]
pub struct ClassicalBall {
    base: DiscreteDistribution,
    cfg: AmbiguityConfig,
    cost: CostSpec,
    standard: Vec<(f64, f64)>,
}

pub fn sample_classical_ball(
    base: &DiscreteDistribution,
    cfg: &AmbiguityConfig,
    cost: &CostSpec,
) -> Result<ClassicalBall> {
    cfg.expect_kind(BallKind::Classical)?;
    Ok(ClassicalBall {
        standard: standardization(base.atoms(), base.weights()),
        base: base.clone(),
        cfg: *cfg,
        cost: *cost,
    })
}

impl ClassicalBall {
    pub fn len(&self) -> usize {
        self.cfg.mc_count
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.mc_count == 0
    }

    /// Draw `index` together with the cost of its displacement coupling.
    pub fn draw_with_cost(&self, index: usize) -> (DiscreteDistribution, f64) {
        let mut rng = draw_rng(self.cfg.seed, index);
        let (k, d) = (self.base.len(), self.base.dim());
        let b: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let m: Vec<f64> = (0..d * d).map(|_| normal(&mut rng)).collect();
        let mut affine = Vec::with_capacity(k * d);
        for atom in self.base.atoms().outer_iter() {
            for r in 0..d {
                let mut v = b[r];
                for c in 0..d {
                    let (mean, sd) = self.standard[c];
                    v += m[r * d + c] * (atom[c] - mean) / sd;
                }
                affine.push(v);
            }
        }
        let jitter: Vec<f64> = (0..k * d).map(|_| normal(&mut rng)).collect();
        let w = self.base.weights();
        let field = blend_to_radius(&mut rng, affine, jitter, w, d, &self.cost, self.cfg.delta);
        let coupling = field_norm(&field, w, d, &self.cost);
        let mut atoms = self.base.atoms().clone();
        atoms.iter_mut().zip(&field).for_each(|(a, f)| *a += f);
        (DiscreteDistribution::from_parts(atoms, w.to_vec()), coupling)
    }

    pub fn draw(&self, index: usize) -> DiscreteDistribution {
        self.draw_with_cost(index).0
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<DiscreteDistribution>> + '_ {
        (0..self.len()).map(|k| Ok(self.draw(k)))
    }
}

/// Explorer of a structural ball around the product reconstruction of a sample.
///
/// Per-coordinate budgets `δ_i^p = e_i δ^p` use a symmetric Dirichlet(1) draw
/// `e`. Each exogenous marginal moves by an affine-plus-jitter field of cost
/// exactly `δ_i`, the perturbed marginals form a product measure, and the
/// result is pushed through `g`. The coordinatewise couplings certify
/// `W^F(base, draw) ≤ δ`.
#[derive(Debug, Clone)]
pub struct StructuralBall {
    model: ScmModel,
    marginals: Vec<Marginal>,
    cfg: AmbiguityConfig,
    cost: CostSpec,
}

pub fn sample_structural_ball(
    base: &SampleMatrix,
    model: &ScmModel,
    cfg: &AmbiguityConfig,
    cost: &CostSpec,
) -> Result<StructuralBall> {
    cfg.expect_kind(BallKind::Structural)?;
    let u = match base.space() {
        Space::Feature => model.push_to_exogenous(base)?,
        Space::Exogenous => {
            if base.dim() != model.node_count() {
                return Err(Error::DimensionMismatch {
                    expected: model.node_count(),
                    got: base.dim(),
                });
            }
            base.clone()
        }
    };
    let marginals: Vec<Marginal> = (0..u.dim()).map(|i| u.marginal(i)).collect();
    let atoms: u128 = marginals.iter().map(|m| m.len() as u128).product();
    let cap = crate::scm::grid_cap();
    if atoms > cap as u128 {
        return Err(Error::GridTooLarge { atoms, cap });
    }
    Ok(StructuralBall {
        model: model.clone(),
        marginals,
        cfg: *cfg,
        cost: *cost,
    })
}

impl StructuralBall {
    pub fn len(&self) -> usize {
        self.cfg.mc_count
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.mc_count == 0
    }

    /// The perturbed exogenous marginals of draw `index`.
    pub fn draw_marginals(&self, index: usize) -> Vec<Marginal> {
        let mut rng = draw_rng(self.cfg.seed, index);
        let n = self.marginals.len();
        let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = e.iter().sum();
        let delta_p = self.cost.pow(self.cfg.delta);
        self.marginals
            .iter()
            .zip(&e)
            .map(|(m, ei)| {
                let radius = self.cost.root(delta_p * ei / total);
                let (mean, sd) = standardization(
                    &Array2::from_shape_vec((m.len(), 1), m.values().to_vec()).expect("column shape"),
                    m.weights(),
                )[0];
                let (a, b) = (normal(&mut rng), normal(&mut rng));
                let affine: Vec<f64> = m.values().iter().map(|v| a + b * (v - mean) / sd).collect();
                let jitter: Vec<f64> = (0..m.len()).map(|_| normal(&mut rng)).collect();
                let field = blend_to_radius(&mut rng, affine, jitter, m.weights(), 1, &self.cost, radius);
                Marginal::from_weighted(
                    m.values().iter().zip(&field).map(|(v, f)| v + f),
                    m.weights().iter().copied(),
                )
            })
            .collect()
    }

    /// Draw `index` in feature space. Fails when a tabulated equation is
    /// evaluated outside its grid.
    pub fn draw(&self, index: usize) -> Result<DiscreteDistribution> {
        let marginals = self.draw_marginals(index);
        let product = DiscreteDistribution::product(&marginals, usize::MAX)?;
        push_forward(&self.model, product)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<DiscreteDistribution>> + '_ {
        (0..self.len()).map(|k| self.draw(k))
    }
}

/// Maps every atom of an exogenous distribution through `g`, keeping weights.
pub fn push_forward(model: &ScmModel, exo: DiscreteDistribution) -> Result<DiscreteDistribution> {
    if exo.dim() != model.node_count() {
        return Err(Error::DimensionMismatch {
            expected: model.node_count(),
            got: exo.dim(),
        });
    }
    let mut atoms = exo.atoms().clone();
    for mut row in atoms.outer_iter_mut() {
        let x = model.forward(row.as_slice().expect("rows are contiguous"))?;
        row.iter_mut().zip(x).for_each(|(a, v)| *a = v);
    }
    Ok(DiscreteDistribution::from_parts(atoms, exo.weights().to_vec()))
}

/// Quantile atoms `Φ⁻¹((j − 1/2)/K)` of the standard normal.
pub fn normal_quantile_grid(k: usize) -> Vec<f64> {
    let std = Normal::standard();
    (0..k)
        .map(|j| std.inverse_cdf((j as f64 + 0.5) / k as f64))
        .collect()
}

/// Independent `N(0, sd_i²)` noises, each discretized on `k` quantile atoms,
/// combined into the full product grid and pushed through the model's
/// equations. Returns the model with the discretized noise and the grid in
/// feature space.
pub fn gaussian_grid_base(model: &ScmModel, sd: &[f64], k: usize) -> Result<(ScmModel, SampleMatrix)> {
    if k == 0 {
        return Err(Error::invalid("grid", "must be at least 1"));
    }
    if sd.len() != model.node_count() {
        return Err(Error::DimensionMismatch {
            expected: model.node_count(),
            got: sd.len(),
        });
    }
    if sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid("sd", "standard deviations must be finite and positive"));
    }
    let z = normal_quantile_grid(k);
    let points: Vec<Vec<f64>> = sd.iter().map(|s| z.iter().map(|v| s * v).collect()).collect();
    let model = model.with_noise(points.iter().map(|p| Noise::Empirical { points: p.clone() }).collect())?;
    let marginals: Vec<Marginal> = points.iter().map(|p| Marginal::uniform(p)).collect();
    let exo = DiscreteDistribution::product(&marginals, crate::scm::grid_cap())?;
    let x = push_forward(&model, exo)?;
    let s = SampleMatrix::with_weights(x.atoms().clone(), x.weights().to_vec(), Space::Feature)?;
    Ok((model, s))
}

/// The two-node demo `A := U_A`, `E := alpha·A + U_E` with standard normal
/// noise on `k` quantile atoms; see [`gaussian_grid_base`].
pub fn demo_base(alpha: f64, k: usize) -> Result<(ScmModel, SampleMatrix)> {
    let model = ScmModel::two_node(alpha, Noise::Uniform { a: 0.0, b: 0.0 });
    gaussian_grid_base(&model, &[1.0, 1.0], k)
}

/// Parameters of a two-node linear model with independent Gaussian noise.
#[derive(Debug, Clone)]
pub struct GaussianBase {
    pub model: ScmModel,
    /// Noise standard deviations, one per node.
    pub sd: Vec<f64>,
    /// Quantile atoms per axis of the output grid.
    pub grid: usize,
}

impl GaussianBase {
    pub fn demo(alpha: f64, grid: usize) -> Self {
        GaussianBase {
            model: ScmModel::two_node(alpha, Noise::Uniform { a: 0.0, b: 0.0 }),
            sd: vec![1.0, 1.0],
            grid,
        }
    }
}

/// A Gaussian plan between the base exogenous law `U` and `V = U + D`, where
/// `D_A = μ_A + d1 Z1 + d3 Z3` and `D_E = μ_E + e1 Z1 + e2 Z2 + e3 Z3 + e4 Z4`,
/// `Z1, Z2` are the standardized base noises and `Z3, Z4` are independent.
///
/// `D_A` carries no `Z2` loading, so the root coordinate of the target is
/// independent of the source's `U_E` given its `U_A`: the conditional law of
/// the source child given both parents is the source's own conditional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianPlan {
    pub mu_a: f64,
    pub d1: f64,
    pub d3: f64,
    pub mu_e: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub e4: f64,
}

impl GaussianPlan {
    fn from_vec(v: &[f64; 8]) -> Self {
        GaussianPlan {
            mu_a: v[0],
            d1: v[1],
            d3: v[2],
            mu_e: v[3],
            e1: v[4],
            e2: v[5],
            e3: v[6],
            e4: v[7],
        }
    }

    /// `E |D|²`.
    pub fn cost(&self) -> f64 {
        [self.mu_a, self.d1, self.d3, self.mu_e, self.e1, self.e2, self.e3, self.e4]
            .iter()
            .map(|v| v * v)
            .sum()
    }

    /// Mean and covariance of `V` given the base standard deviations.
    pub fn target_moments(&self, sd: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
        let la = sd[0] + self.d1;
        let le = sd[1] + self.e2;
        let vaa = la * la + self.d3 * self.d3;
        let vae = la * self.e1 + self.d3 * self.e3;
        let vee = self.e1 * self.e1 + le * le + self.e3 * self.e3 + self.e4 * self.e4;
        ([self.mu_a, self.mu_e], [[vaa, vae], [vae, vee]])
    }

    /// `Cov(U, V)`, row index over `U`.
    pub fn cross_covariance(&self, sd: [f64; 2]) -> [[f64; 2]; 2] {
        [
            [sd[0] * (sd[0] + self.d1), sd[0] * self.e1],
            [0.0, sd[1] * (sd[1] + self.e2)],
        ]
    }
}

/// Monte-Carlo explorer of Gaussian plans that respect the causal order of the
/// two-node model, with quadratic transport cost `E|U − V|² ≤ δ²`.
///
/// Every draw sits on the boundary `E|U − V|² = δ²`. The target
/// is discretized as `m + L z` over the product quantile grid `z`, where `L` is
/// the Cholesky factor of `Cov(V)`, and pushed through `g`.
#[derive(Debug, Clone)]
pub struct GCausalBall {
    base: GaussianBase,
    cfg: AmbiguityConfig,
    z: Vec<f64>,
}

pub fn sample_gcausal_mc(base: &GaussianBase, cfg: &AmbiguityConfig) -> Result<GCausalBall> {
    cfg.expect_kind(BallKind::GcausalMc)?;
    let model = &base.model;
    let n = model.node_count();
    if n != 2 {
        return Err(Error::Unsupported(format!(
            "the causal-plan sampler covers two-node models only, got {n} nodes"
        )));
    }
    if !model.dag().parents(0).is_empty() || model.dag().parents(1) != [0] {
        return Err(Error::Unsupported("the causal-plan sampler needs the edge 0 -> 1".into()));
    }
    if model.equations().iter().any(|e| !matches!(e, Equation::Linear { .. })) {
        return Err(Error::Unsupported("the causal-plan sampler needs linear equations".into()));
    }
    if base.sd.len() != 2 || base.sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid("sd", "need two finite positive standard deviations"));
    }
    if base.grid == 0 {
        return Err(Error::invalid("grid", "must be at least 1"));
    }
    Ok(GCausalBall {
        base: base.clone(),
        cfg: *cfg,
        z: normal_quantile_grid(base.grid),
    })
}

impl GCausalBall {
    pub fn len(&self) -> usize {
        self.cfg.mc_count
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.mc_count == 0
    }

    /// Draw `index`: a unit direction in the linear loadings `(μ_A, d1, μ_E, e1, e2)`
    /// blended with a unit direction in the independent-noise loadings
    /// `(d3, e3, e4)`, noise share uniform on `[0, 1]`, scaled to cost `δ²`.
    pub fn plan(&self, index: usize) -> GaussianPlan {
        let mut rng = draw_rng(self.cfg.seed, index);
        let mut linear = [0.0; 5];
        let mut noise = [0.0; 3];
        linear.iter_mut().chain(noise.iter_mut()).for_each(|x| *x = normal(&mut rng));
        let share: f64 = rng.random();
        let unit = |v: &mut [f64], mix: f64| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let k = if norm > 0.0 { mix * self.cfg.delta / norm } else { 0.0 };
            v.iter_mut().for_each(|x| *x *= k);
        };
        unit(&mut linear, (1.0 - share).sqrt());
        unit(&mut noise, share.sqrt());
        let [mu_a, d1, mu_e, e1, e2] = linear;
        let [d3, e3, e4] = noise;
        GaussianPlan::from_vec(&[mu_a, d1, d3, mu_e, e1, e2, e3, e4])
    }

    fn sd(&self) -> [f64; 2] {
        [self.base.sd[0], self.base.sd[1]]
    }

    /// Base law discretized the same way as the draws.
    pub fn base_distribution(&self) -> DiscreteDistribution {
        self.discretize(&GaussianPlan::from_vec(&[0.0; 8]))
    }

    pub fn discretize(&self, plan: &GaussianPlan) -> DiscreteDistribution {
        let (m, s) = plan.target_moments(self.sd());
        let l11 = s[0][0].sqrt();
        let l21 = if l11 > 0.0 { s[0][1] / l11 } else { 0.0 };
        let l22 = (s[1][1] - l21 * l21).max(0.0).sqrt();
        let k = self.z.len();
        let mut atoms = Array2::zeros((k * k, 2));
        for (a, za) in self.z.iter().enumerate() {
            for (b, zb) in self.z.iter().enumerate() {
                let row = a * k + b;
                atoms[[row, 0]] = m[0] + l11 * za;
                atoms[[row, 1]] = m[1] + l21 * za + l22 * zb;
            }
        }
        let exo = DiscreteDistribution::from_parts(atoms, vec![1.0 / (k * k) as f64; k * k]);
        push_forward(&self.base.model, exo).expect("linear equations map every atom")
    }

    pub fn draw(&self, index: usize) -> DiscreteDistribution {
        self.discretize(&self.plan(index))
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<DiscreteDistribution>> + '_ {
        (0..self.len()).map(|k| Ok(self.draw(k)))
    }
}

/// Monte-Carlo worst case of one loss over a stream of draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorstCase {
    pub value: f64,
    /// Index of the first draw attaining the maximum.
    pub argmax_index: usize,
    /// Standard deviation of the per-draw expectations over `sqrt(draws)`.
    pub std_error: f64,
    pub draws: usize,
}

/// Maximum of `E_q[ψ]` over the stream.
pub fn worst_case_loss<I>(draws: I, psi: &LossFunction) -> Result<WorstCase>
where
    I: IntoIterator<Item = Result<DiscreteDistribution>>,
{
    Ok(worst_case_losses(draws, std::slice::from_ref(psi))?.remove(0))
}

/// One pass over the stream for several losses at once.
pub fn worst_case_losses<I>(draws: I, psis: &[LossFunction]) -> Result<Vec<WorstCase>>
where
    I: IntoIterator<Item = Result<DiscreteDistribution>>,
{
    let mut best = vec![(f64::NEG_INFINITY, 0usize); psis.len()];
    // Welford running mean and squared deviations per loss.
    let mut stats = vec![(0.0f64, 0.0f64); psis.len()];
    let mut count = 0usize;
    for (k, q) in draws.into_iter().enumerate() {
        let q = q?;
        count += 1;
        for (j, psi) in psis.iter().enumerate() {
            let v = psi.expectation(&q)?;
            if v > best[j].0 {
                best[j] = (v, k);
            }
            let (mean, m2) = &mut stats[j];
            let delta = v - *mean;
            *mean += delta / count as f64;
            *m2 += delta * (v - *mean);
        }
    }
    if count == 0 {
        return Err(Error::invalid("draws", "the draw stream is empty"));
    }
    let c = count as f64;
    Ok(best
        .into_iter()
        .zip(stats)
        .map(|((value, argmax_index), (_, m2))| {
            let var = if count > 1 { (m2 / (c - 1.0)).max(0.0) } else { 0.0 };
            WorstCase {
                value,
                argmax_index,
                std_error: (var / c).sqrt(),
                draws: count,
            }
        })
        .collect())
}

/// One trial of the rate experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub trial: usize,
    pub w_classical: f64,
    pub w_factored: f64,
}

/// A least-squares slope of `log mean W` against `log N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Slope {
    pub slope: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateMeans {
    #[serde(rename = "N")]
    pub n: usize,
    pub mean_classical: f64,
    pub mean_factored: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
    pub means: Vec<RateMeans>,
    /// Absent when fewer than two distinct sample sizes were run.
    pub slope_classical: Option<Slope>,
    pub slope_factored: Option<Slope>,
    pub reference_size: usize,
    /// How the classical column was estimated.
    pub classical_estimator: String,
    pub note: String,
}

/// Distances of `N`-sample empirical laws from a large reference sample.
///
/// The reference `P_ref` has `20 · max(N)` points drawn from `model`. The
/// factored column is `W^F(P̂^N_⊗, P_ref)`. The classical column is exact in one
/// dimension. In higher dimensions it is the assignment distance between the
/// sample and a fresh `N`-point subsample of `P_ref`, which has the same
/// `N^(−1/d)` order as the distance to the law itself.
pub fn rate_experiment(
    model: &ScmModel,
    n_list: &[usize],
    trials: usize,
    p: f64,
    seed: u64,
) -> Result<RateTable> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::invalid("N_list", "needs at least one positive sample size"));
    }
    let cost = CostSpec::new(p)?;
    let max_n = *n_list.iter().max().expect("nonempty");
    let reference_size = 20 * max_n;
    let reference = model.sample(reference_size, trial_seed(seed, usize::MAX, 0))?;
    let ref_exo = model.push_to_exogenous(&reference)?;
    let d = model.node_count();
    let ref_marginal = (d == 1).then(|| ref_exo.marginal(0));

    let mut rows = Vec::with_capacity(n_list.len() * trials);
    let mut means = Vec::with_capacity(n_list.len());
    for (ni, &n) in n_list.iter().enumerate() {
        let (mut sum_c, mut sum_f) = (0.0, 0.0);
        for trial in 0..trials {
            let s = model.sample(n, trial_seed(seed, ni, trial))?;
            let w_factored = structural_wasserstein_exact(&s, &reference, model, &cost)?;
            let u = model.push_to_exogenous(&s)?;
            let w_classical = match &ref_marginal {
                Some(m) => wasserstein_1d(&u.marginal(0), m, p),
                None => {
                    let mut rng = draw_rng(trial_seed(seed, ni, trial), 1);
                    let pick = index::sample(&mut rng, reference_size, n);
                    let c = Array2::from_shape_fn((n, n), |(i, j)| {
                        cost.cost_pow(u.rows().row(i), ref_exo.rows().row(pick.index(j)))
                    });
                    let perm = assignment(&c);
                    let total: f64 = perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
                    cost.root(total / n as f64)
                }
            };
            sum_c += w_classical;
            sum_f += w_factored;
            rows.push(RateRow {
                n,
                trial,
                w_classical,
                w_factored,
            });
        }
        means.push(RateMeans {
            n,
            mean_classical: sum_c / trials as f64,
            mean_factored: sum_f / trials as f64,
        });
    }
    let xs: Vec<f64> = means.iter().map(|m| (m.n as f64).ln()).collect();
    let fit = |f: fn(&RateMeans) -> f64| {
        let ys: Vec<f64> = means.iter().map(|m| f(m).ln()).collect();
        log_log_slope(&xs, &ys)
    };
    let classical_estimator = if d == 1 {
        "exact one-dimensional distance to the reference sample".to_string()
    } else {
        "assignment distance to a fresh N-point subsample of the reference".to_string()
    };
    Ok(RateTable {
        slope_classical: fit(|m| m.mean_classical),
        slope_factored: fit(|m| m.mean_factored),
        rows,
        means,
        reference_size,
        classical_estimator,
        note: format!(
            "distances are measured against a {reference_size}-point reference sample standing in \
             for the true law, which biases small distances upward"
        ),
    })
}

fn trial_seed(seed: u64, n_index: usize, trial: usize) -> u64 {
    let mut rng = draw_rng(seed, n_index);
    for _ in 0..trial {
        rng.random::<u64>();
    }
    rng.random()
}

/// Ordinary least-squares slope with its standard error; `None` when the
/// abscissae take fewer than two distinct values or a value is not finite.
fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<Slope> {
    if ys.iter().chain(xs).any(|v| !v.is_finite()) {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let std_error = if xs.len() > 2 {
        let rss: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
            .sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(Slope { slope, std_error })
}
