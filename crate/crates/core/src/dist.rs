//! Finite weighted point sets.

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// A 1-D discrete distribution with strictly increasing support and positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl Marginal {
    /// Sorts the atoms, merges exact ties by summing their weights and drops zero weights.
    pub fn from_weighted(
        values: impl IntoIterator<Item = f64>,
        weights: impl IntoIterator<Item = f64>,
    ) -> Self {
        let mut pairs: Vec<(f64, f64)> = values
            .into_iter()
            .zip(weights)
            .filter(|&(_, w)| w > 0.0)
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Marginal {
            values: Vec::with_capacity(pairs.len()),
            weights: Vec::with_capacity(pairs.len()),
        };
        for (v, w) in pairs {
            match out.values.last() {
                Some(&last) if last == v => *out.weights.last_mut().unwrap() += w,
                _ => {
                    out.values.push(v);
                    out.weights.push(w);
                }
            }
        }
        out
    }

    /// Uniform weights over the given points.
    pub fn uniform(values: &[f64]) -> Self {
        let w = 1.0 / values.len() as f64;
        Self::from_weighted(values.iter().copied(), std::iter::repeat(w))
    }

    pub fn dirac(value: f64) -> Self {
        Marginal {
            values: vec![value],
            weights: vec![1.0],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_distribution(&self) -> DiscreteDistribution {
        let atoms = Array2::from_shape_vec((self.len(), 1), self.values.clone())
            .expect("shape matches length");
        DiscreteDistribution::from_parts(atoms, self.weights.clone())
    }
}

/// Weighted atoms in `R^d`, one atom per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    atoms: Array2<f64>,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(atoms: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.nrows() == 0 {
            return Err(Error::invalid("atoms", "distribution has no atoms"));
        }
        if weights.len() != atoms.nrows() {
            return Err(Error::DimensionMismatch {
                expected: atoms.nrows(),
                got: weights.len(),
            });
        }
        if let Some(k) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("weights[{k}]"), "weights must be finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("weights", format!("weights sum to {total}, not 1")));
        }
        Ok(DiscreteDistribution { atoms, weights })
    }

    pub fn uniform(atoms: Array2<f64>) -> Result<Self> {
        let n = atoms.nrows();
        Self::new(atoms, vec![1.0 / n as f64; n])
    }

    pub(crate) fn from_parts(atoms: Array2<f64>, weights: Vec<f64>) -> Self {
        DiscreteDistribution { atoms, weights }
    }

    /// Every combination of marginal atoms, weighted by the product of marginal weights.
    /// Atoms are enumerated row-major (last coordinate varies fastest).
    pub fn product(marginals: &[Marginal], cap: usize) -> Result<Self> {
        let atoms_needed: u128 = marginals.iter().map(|m| m.len() as u128).product();
        if atoms_needed > cap as u128 {
            return Err(Error::GridTooLarge {
                atoms: atoms_needed,
                cap,
            });
        }
        let total = atoms_needed as usize;
        let d = marginals.len();
        let mut atoms = Array2::zeros((total, d));
        let mut weights = vec![1.0; total];
        let mut stride = total;
        for (i, m) in marginals.iter().enumerate() {
            stride /= m.len();
            for k in 0..total {
                let j = (k / stride) % m.len();
                atoms[[k, i]] = m.values[j];
                weights[k] *= m.weights[j];
            }
        }
        Ok(DiscreteDistribution { atoms, weights })
    }

    pub fn atoms(&self) -> &Array2<f64> {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atom(&self, k: usize) -> ArrayView1<'_, f64> {
        self.atoms.row(k)
    }

    pub fn len(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.atoms.ncols()
    }

    /// Marginal of coordinate `i`, ties merged.
    pub fn marginal(&self, i: usize) -> Marginal {
        Marginal::from_weighted(
            self.atoms.column(i).iter().copied(),
            self.weights.iter().copied(),
        )
    }

    /// `Σ w_k f(atom_k)`.
    pub fn expect(&self, mut f: impl FnMut(ArrayView1<'_, f64>) -> f64) -> f64 {
        self.atoms
            .outer_iter()
            .zip(&self.weights)
            .map(|(a, w)| w * f(a))
            .sum()
    }
}
