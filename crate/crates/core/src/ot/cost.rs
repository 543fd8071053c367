use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dist::DiscreteDistribution;
use crate::error::{Error, Result};

/// Separable ground cost `c(u, v) = (Σ_i |u_i − v_i|^p)^(1/p)`.
///
/// Solvers work with the `p`-th power `c^p = Σ_i |u_i − v_i|^p`, which is what
/// [`CostSpec::cost_pow`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub p: f64,
}

impl CostSpec {
    pub fn new(p: f64) -> Result<Self> {
        if !(p.is_finite() && p >= 1.0) {
            return Err(Error::invalid("p", format!("exponent must be >= 1, got {p}")));
        }
        Ok(CostSpec { p })
    }

    /// `|x|^p`, with the common exponents special-cased for speed and exactness.
    #[inline]
    pub fn pow(&self, x: f64) -> f64 {
        let x = x.abs();
        if self.p == 1.0 {
            x
        } else if self.p == 2.0 {
            x * x
        } else {
            x.powf(self.p)
        }
    }

    #[inline]
    pub fn root(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        if self.p == 1.0 {
            x
        } else if self.p == 2.0 {
            x.sqrt()
        } else {
            x.powf(1.0 / self.p)
        }
    }

    pub fn cost_pow(&self, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
        u.iter().zip(v.iter()).map(|(a, b)| self.pow(a - b)).sum()
    }

    pub fn cost(&self, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
        self.root(self.cost_pow(u, v))
    }
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec { p: 1.0 }
    }
}

/// Matrix of `c(a_k, b_r)^p`.
pub fn cost_matrix(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    cost: &CostSpec,
) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(Array2::from_shape_fn((a.len(), b.len()), |(k, r)| {
        cost.cost_pow(a.atom(k), b.atom(r))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_points_p1() {
        let a = DiscreteDistribution::uniform(array![[0.0], [1.0]]).unwrap();
        let c = cost_matrix(&a, &a, &CostSpec::new(1.0).unwrap()).unwrap();
        assert_eq!(c, array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn squared_distance() {
        let a = DiscreteDistribution::uniform(array![[0.0], [3.0]]).unwrap();
        let c = cost_matrix(&a, &a, &CostSpec::new(2.0).unwrap()).unwrap();
        assert_eq!(c[[0, 1]], 9.0);
        assert_eq!(c[[1, 0]], 9.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = DiscreteDistribution::uniform(array![[0.0]]).unwrap();
        let b = DiscreteDistribution::uniform(array![[0.0, 1.0]]).unwrap();
        assert!(matches!(
            cost_matrix(&a, &b, &CostSpec::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_small_exponent() {
        assert!(CostSpec::new(0.5).is_err());
        assert!(CostSpec::new(f64::NAN).is_err());
    }

    #[test]
    fn matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 1.7;
        let a = Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
        let c = cost_matrix(
            &DiscreteDistribution::uniform(a.clone()).unwrap(),
            &DiscreteDistribution::uniform(b.clone()).unwrap(),
            &CostSpec::new(p).unwrap(),
        )
        .unwrap();
        for k in 0..4 {
            for r in 0..5 {
                let mut s = 0.0;
                for i in 0..3 {
                    s += f64::powf(f64::abs(a[[k, i]] - b[[r, i]]), p);
                }
                assert!((c[[k, r]] - s).abs() < 1e-14);
            }
        }
    }
}
