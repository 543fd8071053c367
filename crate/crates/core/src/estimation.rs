//! Least-squares estimation of linear structural equations and the
//! stability of the relaxed distance under perturbed equations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ot::CostSpec;
use crate::relaxed::{solve_relaxed, RelaxedSolveConfig};
use crate::scm::{model_to_json, DagSpec, Equation, Noise, SampleMatrix, ScmModel, Space};

/// Relative size below which a diagonal entry of `R` marks a singular design.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeFit {
    pub name: String,
    pub intercept: f64,
    /// Coefficients in parent order.
    pub coeffs: Vec<f64>,
    /// Standard errors of the intercept followed by the coefficients.
    pub std_errors: Vec<f64>,
    /// Residual sum of squares over `N − |Pa| − 1`.
    pub residual_variance: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: ScmModel,
    pub nodes: Vec<NodeFit>,
    /// `max_i sup |f_i − f̂_i|` over the sample box, when the true model is known.
    pub sup_gap: Option<f64>,
}

impl FitReport {
    /// The fitted model in the configuration format.
    pub fn model_json(&self) -> Value {
        model_to_json(&self.model)
    }

    /// Fills `sup_gap` against a known generating model.
    pub fn compare_with(mut self, truth: &ScmModel, samples: &SampleMatrix) -> Result<Self> {
        self.sup_gap = Some(sup_gap(truth, &self.model, &sample_box(samples))?);
        Ok(self)
    }
}

/// Per-node ordinary least squares of `x_i` on its parents with an intercept.
///
/// Nodes are named `x0, x1, ...`; see [`fit_linear_anm_named`].
pub fn fit_linear_anm(samples: &SampleMatrix, dag: &DagSpec) -> Result<FitReport> {
    let names = (0..dag.node_count()).map(|i| format!("x{i}")).collect();
    fit_linear_anm_named(samples, dag, names)
}

/// As [`fit_linear_anm`] with explicit node names. Sample weights enter as
/// least-squares weights. The fitted noise at each node is the empirical
/// distribution of its residuals.
pub fn fit_linear_anm_named(
    samples: &SampleMatrix,
    dag: &DagSpec,
    names: Vec<String>,
) -> Result<FitReport> {
    if samples.space() != Space::Feature {
        return Err(Error::invalid("space", "fitting needs a feature-space sample"));
    }
    let n = dag.node_count();
    if samples.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: samples.dim(),
        });
    }
    let rows = samples.rows();
    let count = samples.len();
    let max_parents = (0..n).map(|i| dag.parents(i).len()).max().unwrap_or(0);
    if count <= max_parents + 1 {
        return Err(Error::invalid(
            "N",
            format!("need more than {} samples for {max_parents} parents", max_parents + 1),
        ));
    }
    let sqrt_w: Vec<f64> = samples.weights().iter().map(|w| (w * count as f64).sqrt()).collect();

    let mut equations = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let parents = dag.parents(i);
        let k = parents.len() + 1;
        let x = DMatrix::from_fn(count, k, |r, c| {
            let v = if c == 0 { 1.0 } else { rows[[r, parents[c - 1]]] };
            v * sqrt_w[r]
        });
        let y = DVector::from_fn(count, |r, _| rows[[r, i]] * sqrt_w[r]);
        let qr = x.qr();
        let rmat = qr.r();
        let scale = rmat.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if rmat.diagonal().iter().any(|v| v.abs() <= RANK_TOL * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient { node: i });
        }
        let r_inv = rmat.try_inverse().ok_or(Error::RankDeficient { node: i })?;
        let beta = &r_inv * (qr.q().transpose() * y);
        let residuals: Vec<f64> = (0..count)
            .map(|r| {
                let fit: f64 = beta[0]
                    + parents
                        .iter()
                        .enumerate()
                        .map(|(c, &p)| beta[c + 1] * rows[[r, p]])
                        .sum::<f64>();
                rows[[r, i]] - fit
            })
            .collect();
        let rss: f64 = residuals
            .iter()
            .zip(&sqrt_w)
            .map(|(e, s)| (e * s).powi(2))
            .sum();
        let residual_variance = rss / (count - k) as f64;
        // (XᵀX)⁻¹ = R⁻¹ R⁻ᵀ, so the j-th diagonal entry is the squared norm of row j of R⁻¹.
        let std_errors = (0..k)
            .map(|j| (residual_variance * r_inv.row(j).norm_squared()).sqrt())
            .collect();
        let coeffs: Vec<f64> = beta.iter().skip(1).copied().collect();
        equations.push(Equation::Linear {
            coeffs: coeffs.clone(),
            intercept: beta[0],
        });
        noise.push(Noise::Empirical { points: residuals });
        nodes.push(NodeFit {
            name: names.get(i).cloned().unwrap_or_else(|| format!("x{i}")),
            intercept: beta[0],
            coeffs,
            std_errors,
            residual_variance,
        });
    }
    let model = ScmModel::new(names, dag.clone(), equations, noise)?;
    Ok(FitReport {
        model,
        nodes,
        sup_gap: None,
    })
}

/// Per-coordinate `[min, max]` of a sample.
pub fn sample_box(samples: &SampleMatrix) -> Vec<(f64, f64)> {
    samples
        .rows()
        .columns()
        .into_iter()
        .map(|c| {
            c.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

/// `max_i sup_{x ∈ box} |f_i(x_pa) − g_i(x_pa)|` for two linear models on the
/// same graph. The difference is affine, so its supremum is attained at a
/// corner of the parents' box.
pub fn sup_gap(a: &ScmModel, b: &ScmModel, bbox: &[(f64, f64)]) -> Result<f64> {
    if a.dag() != b.dag() {
        return Err(Error::invalid("dag", "models must share a graph"));
    }
    if bbox.len() != a.node_count() {
        return Err(Error::DimensionMismatch {
            expected: a.node_count(),
            got: bbox.len(),
        });
    }
    let mut worst = 0.0f64;
    for (i, (ea, eb)) in a.equations().iter().zip(b.equations()).enumerate() {
        let (Equation::Linear { coeffs: ca, intercept: ia }, Equation::Linear { coeffs: cb, intercept: ib }) =
            (ea, eb)
        else {
            return Err(Error::Unsupported("sup gap needs linear equations".into()));
        };
        let parents = a.dag().parents(i);
        for corner in 0u64..(1u64 << parents.len()) {
            let mut diff = ia - ib;
            for (k, &p) in parents.iter().enumerate() {
                let (lo, hi) = bbox[p];
                let x = if corner >> k & 1 == 1 { hi } else { lo };
                diff += (ca[k] - cb[k]) * x;
            }
            worst = worst.max(diff.abs());
        }
    }
    Ok(worst)
}

/// Adds `s · r_i` to each linear equation, where `r_i` is a fixed random affine
/// function normalized to sup norm 1 on the box.
fn perturbed(model: &ScmModel, directions: &[Vec<f64>], s: f64) -> Result<ScmModel> {
    let equations = model
        .equations()
        .iter()
        .zip(directions)
        .map(|(e, r)| match e {
            Equation::Linear { coeffs, intercept } => Ok(Equation::Linear {
                intercept: intercept + s * r[0],
                coeffs: coeffs.iter().zip(&r[1..]).map(|(c, d)| c + s * d).collect(),
            }),
            Equation::Tabulated(_) => {
                Err(Error::Unsupported("stability perturbations need linear equations".into()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    model.with_equations(equations)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityRow {
    pub scale: f64,
    pub sup_gap: f64,
    pub distance_true: f64,
    pub distance_perturbed: f64,
    /// `|W^{Fε}(true) − W^{Fε}(perturbed)|`.
    pub gap: f64,
    /// Largest `gap` among the evaluated perturbations of sup norm at most `scale`.
    pub worst_gap: f64,
}

/// Relaxed distance under equations perturbed by exactly `s` in sup norm on
/// the joint sample box, for each scale in `scales` (nonincreasing, ≥ 0).
pub fn stability_curve(
    source: &SampleMatrix,
    target: &SampleMatrix,
    true_model: &ScmModel,
    scales: &[f64],
    cost: &CostSpec,
    cfg: &RelaxedSolveConfig,
    seed: u64,
) -> Result<Vec<StabilityRow>> {
    if scales.is_empty() {
        return Err(Error::invalid("perturb_scales", "needs at least one scale"));
    }
    if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid("perturb_scales", "scales must be finite and >= 0"));
    }
    if scales.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::invalid("perturb_scales", "scales must be nonincreasing"));
    }
    for s in [source, target] {
        if s.space() != Space::Feature {
            return Err(Error::invalid("space", "stability runs on feature-space samples"));
        }
    }
    let bbox: Vec<(f64, f64)> = sample_box(source)
        .into_iter()
        .zip(sample_box(target))
        .map(|((a, b), (c, d))| (a.min(c), b.max(d)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut directions = Vec::with_capacity(true_model.node_count());
    for i in 0..true_model.node_count() {
        let k = true_model.dag().parents(i).len() + 1;
        directions.push((0..k).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>());
    }
    let unit = perturbed(true_model, &directions, 1.0)?;
    // Normalize each node separately so every equation moves by exactly s.
    for (i, r) in directions.iter_mut().enumerate() {
        let single = single_node_gap(true_model, &unit, i, &bbox)?;
        if single > 0.0 {
            r.iter_mut().for_each(|v| *v /= single);
        }
    }

    let base = solve_relaxed(source, target, true_model, cost, cfg)?.require_converged()?;
    let mut rows = scales
        .par_iter()
        .map(|&s| {
            let model = perturbed(true_model, &directions, s)?;
            let distance_perturbed = if s == 0.0 {
                base.distance
            } else {
                solve_relaxed(source, target, &model, cost, cfg)?
                    .require_converged()?
                    .distance
            };
            Ok(StabilityRow {
                scale: s,
                sup_gap: sup_gap(true_model, &model, &bbox)?,
                distance_true: base.distance,
                distance_perturbed,
                gap: (base.distance - distance_perturbed).abs(),
                worst_gap: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // Scales are nonincreasing, so every later row lies inside this row's ball.
    let mut worst = 0.0f64;
    for row in rows.iter_mut().rev() {
        worst = worst.max(row.gap);
        row.worst_gap = worst;
    }
    Ok(rows)
}

fn single_node_gap(a: &ScmModel, b: &ScmModel, node: usize, bbox: &[(f64, f64)]) -> Result<f64> {
    let mut equations = a.equations().to_vec();
    equations[node] = b.equations()[node].clone();
    sup_gap(a, &a.with_equations(equations)?, bbox)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn chain(coeffs: Vec<Vec<f64>>, noise: Noise) -> ScmModel {
        let n = coeffs.len();
        let parents = (0..n).map(|i| if i == 0 { vec![] } else { vec![i - 1] }).collect();
        ScmModel::linear(DagSpec::new(parents), coeffs, vec![noise; n]).unwrap()
    }

    #[test]
    fn noiseless_data_is_interpolated() {
        let truth = chain(vec![vec![], vec![0.7], vec![-1.3]], Noise::Uniform { a: 0.0, b: 0.0 });
        // A constant root makes the design singular, so give the root spread by hand.
        let mut rows = ndarray::Array2::zeros((6, 3));
        for r in 0..6 {
            let u = [r as f64 - 2.5, 0.0, 0.0];
            let x = truth.forward(&u).unwrap();
            for c in 0..3 {
                rows[[r, c]] = x[c];
            }
        }
        let s = SampleMatrix::new(rows, Space::Feature).unwrap();
        let fit = fit_linear_anm(&s, truth.dag()).unwrap();
        assert_abs_diff_eq!(fit.nodes[1].coeffs[0], 0.7, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.nodes[2].coeffs[0], -1.3, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.nodes[2].intercept, 0.0, epsilon = 1e-10);
        assert!(fit.nodes.iter().all(|n| n.residual_variance >= 0.0));
    }

    #[test]
    fn collinear_parents_are_rejected() {
        let dag = DagSpec::new(vec![vec![], vec![0], vec![0, 1]]);
        let truth = ScmModel::linear(
            dag.clone(),
            vec![vec![], vec![2.0], vec![1.0, 1.0]],
            vec![
                Noise::Uniform { a: -1.0, b: 1.0 },
                Noise::Uniform { a: 0.0, b: 0.0 },
                Noise::Uniform { a: -1.0, b: 1.0 },
            ],
        )
        .unwrap();
        let s = truth.sample(50, 1).unwrap();
        assert!(matches!(fit_linear_anm(&s, &dag), Err(Error::RankDeficient { node: 2 })));
    }

    #[test]
    fn too_few_samples() {
        let truth = chain(vec![vec![], vec![1.0]], Noise::Uniform { a: -1.0, b: 1.0 });
        let s = truth.sample(2, 1).unwrap();
        assert!(fit_linear_anm(&s, truth.dag()).is_err());
    }

    #[test]
    fn refit_of_reconstructed_data_is_a_fixpoint() {
        let truth = chain(vec![vec![], vec![0.5], vec![0.25]], Noise::Uniform { a: -1.0, b: 1.0 });
        let s = truth.sample(200, 4).unwrap();
        let fit = fit_linear_anm(&s, truth.dag()).unwrap();
        let again = fit.model.push_to_feature(&fit.model.push_to_exogenous(&s).unwrap()).unwrap();
        let refit = fit_linear_anm(&again, truth.dag()).unwrap();
        for (a, b) in fit.nodes.iter().zip(&refit.nodes) {
            assert_abs_diff_eq!(a.intercept, b.intercept, epsilon = 1e-8);
            for (x, y) in a.coeffs.iter().zip(&b.coeffs) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn fitted_model_round_trips_through_config() {
        let truth = chain(vec![vec![], vec![0.5]], Noise::Uniform { a: -1.0, b: 1.0 });
        let s = truth.sample(30, 4).unwrap();
        let fit = fit_linear_anm_named(&s, truth.dag(), vec!["A".into(), "E".into()]).unwrap();
        let text = fit.model_json().to_string();
        let back = crate::scm::model_from_json(&text).unwrap();
        assert_eq!(back, fit.model);
        let x = [0.3, -0.2];
        let u = back.inverse(&x).unwrap();
        let x2 = back.forward(&u).unwrap();
        assert_abs_diff_eq!(x2[1], x[1], epsilon = 1e-12);
    }

    #[test]
    fn constant_shift_has_exact_sup_gap() {
        let dag = DagSpec::new(vec![vec![], vec![]]);
        let zero = ScmModel::linear(dag, vec![vec![], vec![]], vec![Noise::Uniform { a: -1.0, b: 1.0 }; 2]).unwrap();
        let mut eq = zero.equations().to_vec();
        eq[1] = Equation::Linear {
            coeffs: vec![],
            intercept: 0.37,
        };
        let shifted = zero.with_equations(eq).unwrap();
        assert_eq!(sup_gap(&zero, &shifted, &[(-1.0, 1.0), (-1.0, 1.0)]).unwrap(), 0.37);
    }

    #[test]
    fn stability_rows_have_requested_sup_gap() {
        let truth = chain(vec![vec![], vec![0.5]], Noise::Uniform { a: -1.0, b: 1.0 });
        let a = truth.sample(4, 1).unwrap();
        let b = truth.sample(4, 2).unwrap();
        let cfg = RelaxedSolveConfig::new(0.05, 2.0);
        let cost = CostSpec::new(2.0).unwrap();
        let rows = stability_curve(&a, &b, &truth, &[0.2, 0.1, 0.0], &cost, &cfg, 3).unwrap();
        assert_abs_diff_eq!(rows[0].sup_gap, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[1].sup_gap, 0.1, epsilon = 1e-12);
        assert_eq!(rows[2].gap, 0.0);
        assert_eq!(rows[0].worst_gap, rows[0].gap.max(rows[1].gap));
        assert!(rows.windows(2).all(|w| w[1].worst_gap <= w[0].worst_gap));
        assert!(stability_curve(&a, &b, &truth, &[0.1, 0.2], &cost, &cfg, 3).is_err());
    }
}
