//! Square assignment by shortest augmenting paths (Hungarian method with potentials).
//!
//! Two uniform empirical measures of equal size have an optimal plan supported on a
//! permutation, so this solves OT between them in `O(N³)` without the atom cap of
//! [`super::exact_ot`].

use ndarray::Array2;

/// Optimal permutation for a square cost matrix: `result[row] = column`.
pub fn assignment(c: &Array2<f64>) -> Vec<usize> {
    let n = c.nrows();
    assert_eq!(c.ncols(), n, "assignment needs a square matrix");
    // 1-based arrays with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[row_of[j] - 1] = j - 1;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::DiscreteDistribution;
    use crate::ot::{exact_ot, CostSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn agrees_with_transport_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cost = CostSpec::default();
        for _ in 0..30 {
            let n = rng.random_range(1..20);
            let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
            let y = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
            let a = DiscreteDistribution::uniform(x).unwrap();
            let b = DiscreteDistribution::uniform(y).unwrap();
            let c = crate::ot::cost_matrix(&a, &b, &cost).unwrap();
            let perm = assignment(&c);
            let mut seen = vec![false; n];
            for &j in &perm {
                assert!(!seen[j]);
                seen[j] = true;
            }
            let total: f64 = perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>() / n as f64;
            let lp = exact_ot(&a, &b, &cost).unwrap().objective;
            assert!((total - lp).abs() < 1e-10, "{total} vs {lp}");
        }
    }
}
