//! Additive-noise structural causal models.
//!
//! A model assigns every node `i` an equation `x_i = f_i(x_pa(i)) + u_i` with a
//! scalar, bounded, independently drawn noise `u_i`. Because the noise enters
//! additively, the reduced form `g` (noise to features) is evaluated by forward
//! substitution in topological order and its inverse is a single pass of
//! residual computation.

mod config;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dist::{DiscreteDistribution, Marginal};
use crate::error::{Error, Result};

pub use config::{model_from_json, model_to_json};

/// Default cap on the number of atoms in a product grid.
pub const DEFAULT_GRID_CAP: usize = 1_000_000;

/// Environment variable overriding [`DEFAULT_GRID_CAP`].
pub const GRID_CAP_ENV: &str = "SCOT_GRID_CAP";

/// Grid cap in effect: `SCOT_GRID_CAP` when set to a positive integer, otherwise the default.
pub fn grid_cap() -> usize {
    std::env::var(GRID_CAP_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(DEFAULT_GRID_CAP)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DagSpec {
    parents: Vec<Vec<usize>>,
}

impl DagSpec {
    pub fn new(parents: Vec<Vec<usize>>) -> Self {
        DagSpec { parents }
    }

    /// Builds the parent lists from `(parent, child)` pairs; parents keep edge order.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut parents = vec![Vec::new(); node_count];
        for (k, &(from, to)) in edges.iter().enumerate() {
            if from >= node_count || to >= node_count {
                return Err(Error::invalid(
                    format!("edges[{k}]"),
                    format!("node index out of range for {node_count} nodes"),
                ));
            }
            if !parents[to].contains(&from) {
                parents[to].push(from);
            }
        }
        Ok(DagSpec { parents })
    }

    pub fn node_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }
}

/// Topological order of `dag`, preferring the smallest ready index at every step.
pub fn validate_dag(dag: &DagSpec) -> Result<Vec<usize>> {
    let n = dag.node_count();
    for (i, pa) in dag.parents.iter().enumerate() {
        for &j in pa {
            if j >= n {
                return Err(Error::invalid(
                    format!("parents[{i}]"),
                    format!("parent index {j} out of range for {n} nodes"),
                ));
            }
            if j == i {
                return Err(Error::CycleDetected(vec![i]));
            }
        }
    }
    let mut indegree: Vec<usize> = dag.parents.iter().map(Vec::len).collect();
    let mut children = vec![Vec::new(); n];
    for (i, pa) in dag.parents.iter().enumerate() {
        for &j in pa {
            children[j].push(i);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err(Error::CycleDetected(find_cycle(dag, &indegree)))
    }
}

/// Walks parent links among the nodes Kahn's algorithm could not release.
/// Every such node has an unreleased parent, so the walk must revisit a node.
fn find_cycle(dag: &DagSpec, indegree: &[usize]) -> Vec<usize> {
    let stuck = |i: usize| indegree[i] > 0;
    let start = (0..dag.node_count()).find(|&i| stuck(i)).unwrap_or(0);
    let mut seen_at = BTreeMap::new();
    let mut path = Vec::new();
    let mut cur = start;
    loop {
        if let Some(&pos) = seen_at.get(&cur) {
            let mut cycle: Vec<usize> = path[pos..].to_vec();
            cycle.reverse();
            return cycle;
        }
        seen_at.insert(cur, path.len());
        path.push(cur);
        cur = match dag.parents[cur].iter().copied().find(|&p| stuck(p)) {
            Some(p) => p,
            None => return path,
        };
    }
}

/// Scalar map on a rectilinear grid, evaluated by multilinear interpolation.
/// The declared domain is the box spanned by the grid axes.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedMap {
    axes: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl TabulatedMap {
    /// `values` is row-major over `axes` (last axis varies fastest).
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        for (k, axis) in axes.iter().enumerate() {
            if axis.is_empty() {
                return Err(Error::invalid(format!("grid[{k}]"), "empty axis"));
            }
            if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(
                    format!("grid[{k}]"),
                    "axis must be finite and strictly increasing",
                ));
            }
        }
        let expected: usize = axes.iter().map(Vec::len).product();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("values", "non-finite table entry"));
        }
        Ok(TabulatedMap { axes, values })
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn contains(&self, args: &[f64]) -> bool {
        args.len() == self.axes.len()
            && self
                .axes
                .iter()
                .zip(args)
                .all(|(ax, &a)| a >= ax[0] && a <= ax[ax.len() - 1])
    }

    /// Returns `None` outside the declared box.
    pub fn eval(&self, args: &[f64]) -> Option<f64> {
        if !self.contains(args) {
            return None;
        }
        let k = self.axes.len();
        // Lower cell index and fractional offset per axis.
        let mut lo = Vec::with_capacity(k);
        let mut frac = Vec::with_capacity(k);
        for (ax, &a) in self.axes.iter().zip(args) {
            if ax.len() == 1 {
                lo.push(0);
                frac.push(0.0);
                continue;
            }
            let j = ax.partition_point(|&v| v <= a).clamp(1, ax.len() - 1) - 1;
            lo.push(j);
            frac.push((a - ax[j]) / (ax[j + 1] - ax[j]));
        }
        let mut total = 0.0;
        for corner in 0..(1usize << k) {
            let mut w = 1.0;
            let mut flat = 0;
            for axis in 0..k {
                let up = (corner >> axis) & 1 == 1;
                let len = self.axes[axis].len();
                if up && len == 1 {
                    w = 0.0;
                    break;
                }
                w *= if up { frac[axis] } else { 1.0 - frac[axis] };
                flat = flat * len + lo[axis] + usize::from(up);
            }
            if w != 0.0 {
                total += w * self.values[flat];
            }
        }
        Some(total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Equation {
    /// `f(x_pa) = intercept + Σ coeffs[k] · x_pa[k]`, coefficients in parent order.
    Linear { coeffs: Vec<f64>, intercept: f64 },
    Tabulated(TabulatedMap),
}

impl Equation {
    pub fn zero(parent_count: usize) -> Self {
        Equation::Linear {
            coeffs: vec![0.0; parent_count],
            intercept: 0.0,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Equation::Linear { coeffs, .. } => coeffs.len(),
            Equation::Tabulated(t) => t.axes.len(),
        }
    }

    fn eval(&self, args: &[f64]) -> Option<f64> {
        match self {
            Equation::Linear { coeffs, intercept } => {
                Some(intercept + coeffs.iter().zip(args).map(|(c, a)| c * a).sum::<f64>())
            }
            Equation::Tabulated(t) => t.eval(args),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Noise {
    Uniform { a: f64, b: f64 },
    TruncatedGaussian { mean: f64, sd: f64, lo: f64, hi: f64 },
    Empirical { points: Vec<f64> },
}

impl Noise {
    fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            Noise::Uniform { a, b } => {
                if !(a.is_finite() && b.is_finite()) || a > b {
                    return Err("uniform bounds must be finite with a <= b".into());
                }
            }
            Noise::TruncatedGaussian { mean, sd, lo, hi } => {
                if !(mean.is_finite() && sd.is_finite() && sd > 0.0) {
                    return Err("truncated-gaussian needs finite mean and sd > 0".into());
                }
                if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                    return Err("truncation bounds must be finite with lo < hi".into());
                }
            }
            Noise::Empirical { ref points } => {
                if points.is_empty() || points.iter().any(|p| !p.is_finite()) {
                    return Err("empirical noise needs a nonempty list of finite points".into());
                }
            }
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Noise::Uniform { a, b } => a + (b - a) * rng.random::<f64>(),
            Noise::TruncatedGaussian { mean, sd, lo, hi } => {
                // Inverse-CDF sampling restricted to [lo, hi].
                let std = Normal::standard();
                let (fa, fb) = (std.cdf((lo - mean) / sd), std.cdf((hi - mean) / sd));
                let q = fa + (fb - fa) * rng.random::<f64>();
                let z = std.inverse_cdf(q.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
                (mean + sd * z).clamp(lo, hi)
            }
            Noise::Empirical { ref points } => points[rng.random_range(0..points.len())],
        }
    }
}

/// Which space a [`SampleMatrix`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Feature,
    Exogenous,
}

/// Weighted rows of length `n`, tagged with the space they live in.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    rows: Array2<f64>,
    weights: Vec<f64>,
    space: Space,
}

impl SampleMatrix {
    /// Uniform weights `1/N`.
    pub fn new(rows: Array2<f64>, space: Space) -> Result<Self> {
        let n = rows.nrows();
        Self::with_weights(rows, vec![1.0 / n as f64; n], space)
    }

    /// Weights are checked for nonnegativity and renormalized after a 1e-9 sanity check on the sum.
    pub fn with_weights(rows: Array2<f64>, weights: Vec<f64>, space: Space) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::invalid("rows", "sample matrix has no rows"));
        }
        if weights.len() != rows.nrows() {
            return Err(Error::DimensionMismatch {
                expected: rows.nrows(),
                got: weights.len(),
            });
        }
        if let Some(k) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("weight[{k}]"), "weights must be finite and >= 0"));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("rows", "non-finite sample value"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("weight", format!("weights sum to {total}, not 1")));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(SampleMatrix {
            rows,
            weights,
            space,
        })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Empirical marginal of one column, ties merged with summed weight.
    pub fn marginal(&self, column: usize) -> Marginal {
        Marginal::from_weighted(
            self.rows.column(column).iter().copied(),
            self.weights.iter().copied(),
        )
    }

    /// The weighted rows as a distribution (duplicates are not merged).
    pub fn to_distribution(&self) -> DiscreteDistribution {
        DiscreteDistribution::from_parts(self.rows.clone(), self.weights.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmModel {
    names: Vec<String>,
    dag: DagSpec,
    order: Vec<usize>,
    equations: Vec<Equation>,
    noise: Vec<Noise>,
}

impl ScmModel {
    pub fn new(
        names: Vec<String>,
        dag: DagSpec,
        equations: Vec<Equation>,
        noise: Vec<Noise>,
    ) -> Result<Self> {
        let n = dag.node_count();
        for (what, len) in [("names", names.len()), ("equations", equations.len()), ("noise", noise.len())] {
            if len != n {
                return Err(Error::invalid(what, format!("expected {n} entries, got {len}")));
            }
        }
        let order = validate_dag(&dag)?;
        for i in 0..n {
            if equations[i].arity() != dag.parents(i).len() {
                return Err(Error::invalid(
                    format!("equations.{}", names[i]),
                    format!(
                        "equation takes {} arguments but node has {} parents",
                        equations[i].arity(),
                        dag.parents(i).len()
                    ),
                ));
            }
            noise[i]
                .validate()
                .map_err(|m| Error::invalid(format!("noise.{}", names[i]), m))?;
        }
        Ok(ScmModel {
            names,
            dag,
            order,
            equations,
            noise,
        })
    }

    /// Linear model from a coefficient list per node (parent order), zero intercepts.
    pub fn linear(dag: DagSpec, coeffs: Vec<Vec<f64>>, noise: Vec<Noise>) -> Result<Self> {
        let names = (0..dag.node_count()).map(|i| format!("x{i}")).collect();
        let equations = coeffs
            .into_iter()
            .map(|c| Equation::Linear {
                coeffs: c,
                intercept: 0.0,
            })
            .collect();
        ScmModel::new(names, dag, equations, noise)
    }

    /// The two-node demo `A := U_A`, `E := alpha·A + U_E`.
    pub fn two_node(alpha: f64, noise: Noise) -> Self {
        let dag = DagSpec::new(vec![vec![], vec![0]]);
        let names = vec!["A".to_string(), "E".to_string()];
        let equations = vec![
            Equation::zero(0),
            Equation::Linear {
                coeffs: vec![alpha],
                intercept: 0.0,
            },
        ];
        ScmModel::new(names, dag, equations, vec![noise.clone(), noise])
            .expect("two-node demo is well formed")
    }

    pub fn node_count(&self) -> usize {
        self.dag.node_count()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dag(&self) -> &DagSpec {
        &self.dag
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn equations(&self) -> &[Equation] {
        &self.equations
    }

    pub fn noise(&self) -> &[Noise] {
        &self.noise
    }

    /// Same graph and noise with new equations.
    pub fn with_equations(&self, equations: Vec<Equation>) -> Result<Self> {
        ScmModel::new(self.names.clone(), self.dag.clone(), equations, self.noise.clone())
    }

    /// Same graph and equations with new noise.
    pub fn with_noise(&self, noise: Vec<Noise>) -> Result<Self> {
        ScmModel::new(self.names.clone(), self.dag.clone(), self.equations.clone(), noise)
    }

    fn structural_term(&self, node: usize, x: &[f64]) -> Result<f64> {
        let args: Vec<f64> = self.dag.parents(node).iter().map(|&j| x[j]).collect();
        self.equations[node].eval(&args).ok_or_else(|| {
            Error::DomainViolation(format!(
                "equation for node `{}` queried at {:?} outside its declared domain",
                self.names[node], args
            ))
        })
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.node_count() {
            return Err(Error::DimensionMismatch {
                expected: self.node_count(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `g(u)`: forward substitution in topological order.
    pub fn forward(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        let mut x = vec![0.0; u.len()];
        for &i in &self.order {
            x[i] = self.structural_term(i, &x)? + u[i];
        }
        Ok(x)
    }

    /// `g⁻¹(x)`: the residual `x_i − f_i(x_pa(i))` at every node.
    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        (0..x.len())
            .map(|i| Ok(x[i] - self.structural_term(i, x)?))
            .collect()
    }

    /// Draws `count` i.i.d. exogenous vectors (node by node within a row) and maps them through `g`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<SampleMatrix> {
        if count == 0 {
            return Err(Error::invalid("N", "sample count must be at least 1"));
        }
        let n = self.node_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Array2::zeros((count, n));
        let mut u = vec![0.0; n];
        for r in 0..count {
            for (i, noise) in self.noise.iter().enumerate() {
                u[i] = noise.draw(&mut rng);
            }
            let x = self.forward(&u)?;
            rows.row_mut(r).assign(&ndarray::ArrayView1::from(&x));
        }
        SampleMatrix::new(rows, Space::Feature)
    }

    fn map_rows(
        &self,
        s: &SampleMatrix,
        from: Space,
        to: Space,
        f: impl Fn(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<SampleMatrix> {
        if s.space != from {
            return Err(Error::invalid(
                "space",
                format!("expected a {from:?}-space sample, got {:?}", s.space),
            ));
        }
        if s.dim() != self.node_count() {
            return Err(Error::DimensionMismatch {
                expected: self.node_count(),
                got: s.dim(),
            });
        }
        let mut rows = Array2::zeros(s.rows.raw_dim());
        for (r, row) in s.rows.outer_iter().enumerate() {
            let mapped = f(&row.to_vec())?;
            rows.row_mut(r).assign(&ndarray::ArrayView1::from(&mapped));
        }
        Ok(SampleMatrix {
            rows,
            weights: s.weights.clone(),
            space: to,
        })
    }

    /// Row-wise `g⁻¹`; weights are preserved.
    pub fn push_to_exogenous(&self, s: &SampleMatrix) -> Result<SampleMatrix> {
        self.map_rows(s, Space::Feature, Space::Exogenous, |x| self.inverse(x))
    }

    /// Row-wise `g`; weights are preserved.
    pub fn push_to_feature(&self, s: &SampleMatrix) -> Result<SampleMatrix> {
        self.map_rows(s, Space::Exogenous, Space::Feature, |u| self.forward(u))
    }

    /// Product of the per-coordinate empirical marginals of an exogenous sample,
    /// under the grid cap from [`grid_cap`].
    pub fn product_empirical(&self, s: &SampleMatrix) -> Result<DiscreteDistribution> {
        self.product_empirical_with_cap(s, grid_cap())
    }

    pub fn product_empirical_with_cap(
        &self,
        s: &SampleMatrix,
        cap: usize,
    ) -> Result<DiscreteDistribution> {
        if s.space != Space::Exogenous {
            return Err(Error::invalid("space", "product_empirical needs an exogenous sample"));
        }
        if s.dim() != self.node_count() {
            return Err(Error::DimensionMismatch {
                expected: self.node_count(),
                got: s.dim(),
            });
        }
        let marginals: Vec<Marginal> = (0..s.dim()).map(|i| s.marginal(i)).collect();
        DiscreteDistribution::product(&marginals, cap)
    }
}
