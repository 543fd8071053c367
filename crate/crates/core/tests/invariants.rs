//! Property tests for the invariants each module promises.

use ndarray::Array2;
use proptest::prelude::*;

use scot::dro::{radius_factored, radius_upper, RadiusParams};
use scot::estimation::fit_linear_anm;
use scot::ot::{
    cost_matrix, exact_ot, factored_wasserstein_pow, sinkhorn, wasserstein_1d, wasserstein_1d_pow,
    CostSpec, TransportPlan,
};
use scot::relaxed::{pi_otimes, solve_problem, ExogenousProblem, RelaxedSolveConfig};
use scot::scm::{DagSpec, Noise, ScmModel, Space};
use scot::{DiscreteDistribution, Marginal};

fn weights(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

/// A distribution with `n` atoms in `dim` dimensions and positive weights.
fn distribution(max: usize, dim: usize) -> impl Strategy<Value = DiscreteDistribution> {
    (1..=max).prop_flat_map(move |n| {
        (
            prop::collection::vec(-2.0f64..2.0, n * dim),
            prop::collection::vec(0.05f64..1.0, n),
        )
            .prop_map(move |(x, w)| {
                DiscreteDistribution::new(Array2::from_shape_vec((n, dim), x).unwrap(), weights(&w)).unwrap()
            })
    })
}

fn marginal(max: usize) -> impl Strategy<Value = Marginal> {
    (1..=max).prop_flat_map(|n| {
        (prop::collection::vec(-2.0f64..2.0, n), prop::collection::vec(0.05f64..1.0, n))
            .prop_map(|(v, w)| Marginal::from_weighted(v, weights(&w)))
    })
}

fn p_value() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.0), Just(2.0)]
}

/// A linear chain `x0 → x1 → x2` with the given coefficients.
fn chain(c1: f64, c2: f64) -> ScmModel {
    let dag = DagSpec::new(vec![vec![], vec![0], vec![0, 1]]);
    ScmModel::linear(dag, vec![vec![], vec![c1], vec![c2, -c1]], vec![Noise::Uniform { a: -1.0, b: 1.0 }; 3]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduced_form_is_a_bijection(c1 in -2.0f64..2.0, c2 in -2.0f64..2.0, u in prop::collection::vec(-5.0f64..5.0, 3)) {
        let m = chain(c1, c2);
        let x = m.forward(&u).unwrap();
        let back = m.inverse(&x).unwrap();
        let again = m.forward(&back).unwrap();
        for i in 0..3 {
            prop_assert!((back[i] - u[i]).abs() < 1e-10);
            prop_assert!((again[i] - x[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_inverse_is_unit_lower_triangular(c1 in -2.0f64..2.0, c2 in -2.0f64..2.0, x in prop::collection::vec(-3.0f64..3.0, 3)) {
        let m = chain(c1, c2);
        let h = 1e-4;
        for j in 0..3 {
            let mut up = x.clone();
            let mut down = x.clone();
            up[j] += h;
            down[j] -= h;
            let (a, b) = (m.inverse(&up).unwrap(), m.inverse(&down).unwrap());
            for i in 0..3 {
                let d = (a[i] - b[i]) / (2.0 * h);
                let expected = if i == j { 1.0 } else if i < j { 0.0 } else { d };
                prop_assert!((d - expected).abs() < 1e-6, "J[{i}][{j}] = {d}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_products_keep_marginals(n in 1usize..12, seed in any::<u64>()) {
        let m = chain(0.5, 0.3);
        let s = m.sample(n, seed).unwrap();
        prop_assert_eq!(&s, &m.sample(n, seed).unwrap());
        let exo = m.push_to_exogenous(&s).unwrap();
        let product = m.product_empirical(&exo).unwrap();
        for i in 0..3 {
            let from_product = product.marginal(i);
            let direct = exo.marginal(i);
            prop_assert_eq!(from_product.values(), direct.values());
            for (a, b) in from_product.weights().iter().zip(direct.weights()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn exact_ot_vanishes_on_the_diagonal_and_is_symmetric(a in distribution(8, 2), b in distribution(8, 2), p in p_value()) {
        let cost = CostSpec::new(p).unwrap();
        prop_assert!(exact_ot(&a, &a, &cost).unwrap().value.abs() <= 1e-10);
        let ab = exact_ot(&a, &b, &cost).unwrap().value;
        let ba = exact_ot(&b, &a, &cost).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-10);
    }

    #[test]
    fn one_dimensional_closed_form_matches_the_lp(a in marginal(10), b in marginal(10), p in p_value()) {
        let lp = exact_ot(&a.to_distribution(), &b.to_distribution(), &CostSpec::new(p).unwrap()).unwrap().value;
        prop_assert!((wasserstein_1d(&a, &b, p) - lp).abs() <= 1e-9);
    }

    #[test]
    fn factored_distance_sums_coordinate_distances(a in prop::collection::vec(marginal(4), 2), b in prop::collection::vec(marginal(4), 2), p in p_value()) {
        let sum: f64 = a.iter().zip(&b).map(|(x, y)| wasserstein_1d_pow(x, y, p)).sum();
        prop_assert_eq!(factored_wasserstein_pow(&a, &b, p).unwrap(), sum);
        let ja = DiscreteDistribution::product(&a, 1 << 20).unwrap();
        let jb = DiscreteDistribution::product(&b, 1 << 20).unwrap();
        let lp = exact_ot(&ja, &jb, &CostSpec::new(p).unwrap()).unwrap().objective;
        prop_assert!((sum - lp).abs() <= 1e-9);
    }

    #[test]
    fn entropic_transport_cost_grows_with_eps(a in distribution(6, 1), b in distribution(6, 1), p in p_value()) {
        let cost = CostSpec::new(p).unwrap();
        let mean = cost_matrix(&a, &b, &cost).unwrap().mean().unwrap().max(1e-3);
        let mut last = f64::NEG_INFINITY;
        for rel in [0.01, 0.1, 1.0, 10.0] {
            let r = sinkhorn(&a, &b, &cost, rel * mean, 1e-12, 100_000).unwrap();
            prop_assert!(r.converged);
            prop_assert!(r.plan.iter().all(|&m| m > 0.0));
            prop_assert!(r.objective >= last - 1e-8);
            last = r.objective;
        }
    }

    #[test]
    fn kl_to_product_is_zero_exactly_on_products(
        q1 in prop::collection::vec(0.05f64..1.0, 4),
        q2 in prop::collection::vec(0.05f64..1.0, 6),
        bump in 0.05f64..0.5,
    ) {
        let (q1, q2) = (weights(&q1), weights(&q2));
        // Pair couplings of shape 2×2 and 2×3 on axes (u1, u2, v1, v2).
        let shape = [2usize, 2, 2, 3];
        let product = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |i| q1[i[0] * 2 + i[2]] * q2[i[1] * 3 + i[3]]);
        let plan = TransportPlan::from_tensor(product.clone()).unwrap();
        prop_assert!(plan.entropy_report().kl_to_product <= 1e-10);
        prop_assert!(plan.kl_direct().abs() <= 1e-10);

        // Moving mass between two cells that share every pair marginal but one breaks the product.
        let mut skewed = product;
        let moved = bump * skewed[[0, 0, 0, 0]].min(skewed[[1, 1, 0, 0]]);
        skewed[[0, 0, 0, 0]] -= moved;
        skewed[[1, 1, 0, 0]] -= moved;
        skewed[[0, 1, 0, 0]] += moved;
        skewed[[1, 0, 0, 0]] += moved;
        let plan = TransportPlan::from_tensor(skewed).unwrap();
        let report = plan.entropy_report();
        prop_assert!(report.kl_to_product > 1e-10);
        prop_assert!((report.kl_to_product - plan.kl_direct()).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relaxed_solves_descend_stay_feasible_and_sandwiched(seed in 0u64..10_000, rel in prop_oneof![Just(0.01), Just(0.3), Just(5.0)], p in p_value()) {
        let m = ScmModel::two_node(0.5, Noise::Uniform { a: -1.0, b: 1.0 });
        let (a, b) = (m.sample(4, seed).unwrap(), m.sample(4, seed + 1).unwrap());
        let problem = ExogenousProblem::from_samples(&a, &b, &m, CostSpec::new(p).unwrap()).unwrap();
        let cfg = RelaxedSolveConfig::new(rel * problem.mean_cost(), p);
        let r = solve_problem(&problem, &cfg, None).unwrap();
        prop_assert!(r.converged);
        for w in r.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        prop_assert!(r.plan.axis_residuals().iter().all(|&e| e <= cfg.inner_tol));
        let (ja, jb) = problem.expanded().unwrap();
        let w = exact_ot(&ja, &jb, &CostSpec::new(p).unwrap()).unwrap().value;
        prop_assert!(w - 1e-6 <= r.distance && r.distance <= problem.structural_exact() + 1e-6);

        let once = pi_otimes(&r.plan);
        let twice = pi_otimes(&once);
        for (x, y) in once.mass().iter().zip(twice.mass()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn refitting_a_fitted_model_is_a_fixpoint(seed in any::<u64>(), c1 in -1.5f64..1.5, c2 in -1.5f64..1.5) {
        let truth = chain(c1, c2);
        let s = truth.sample(40, seed).unwrap();
        let first = fit_linear_anm(&s, truth.dag()).unwrap();
        let fitted = &first.model;
        // The fitted model's own residuals regenerate the sample.
        let regenerated = fitted.push_to_feature(&fitted.push_to_exogenous(&s).unwrap()).unwrap();
        prop_assert_eq!(regenerated.space(), Space::Feature);
        let second = fit_linear_anm(&regenerated, truth.dag()).unwrap();
        for (a, b) in first.nodes.iter().zip(&second.nodes) {
            prop_assert!((a.intercept - b.intercept).abs() <= 1e-8);
            for (x, y) in a.coeffs.iter().zip(&b.coeffs) {
                prop_assert!((x - y).abs() <= 1e-8);
            }
        }
        let u = [0.3, -0.7, 0.1];
        let back = fitted.inverse(&fitted.forward(&u).unwrap()).unwrap();
        prop_assert!(u.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn radii_shrink_with_more_samples(n in 2usize..5000, eps_conf in 0.001f64..0.9, d in 1usize..6, p in p_value()) {
        let at = |n_samples| RadiusParams { n_samples, eps_conf, d, p, ..RadiusParams::default() };
        let (small, large) = (at(n), at(2 * n));
        prop_assert!(radius_upper(&large).unwrap() <= radius_upper(&small).unwrap());
        let (fs, fl) = (radius_factored(&small).unwrap(), radius_factored(&large).unwrap());
        prop_assert!(fl <= fs || !fs.is_finite());
        let tighter = RadiusParams { eps_conf: eps_conf / 2.0, ..small };
        prop_assert!(radius_upper(&tighter).unwrap() >= radius_upper(&small).unwrap());
    }
}
