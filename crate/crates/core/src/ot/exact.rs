//! Exact discrete OT by the transportation simplex.
//!
//! The basis is a spanning tree on the bipartite row/column graph with
//! `m + n − 1` cells. Flows on the tree only ever change by the ratio-test
//! amount, so they stay exact up to additions and subtractions of the input
//! weights. Entering cells follow Dantzig's rule until a long run of
//! degenerate pivots, after which Bland's rule guarantees termination.

use std::collections::VecDeque;

use ndarray::Array2;

use super::cost::{cost_matrix, CostSpec};
use crate::dist::DiscreteDistribution;
use crate::error::{Error, Result};

/// Largest atom count per side accepted by [`exact_ot`].
pub const EXACT_ATOM_CAP: usize = 64;

#[derive(Debug, Clone)]
pub struct ExactOt {
    /// `(min Σ π c^p)^(1/p)`.
    pub value: f64,
    /// `min Σ π c^p`.
    pub objective: f64,
    pub plan: Array2<f64>,
}

/// Exact OT between two distributions with at most [`EXACT_ATOM_CAP`] atoms each.
pub fn exact_ot(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    cost: &CostSpec,
) -> Result<ExactOt> {
    if a.len() > EXACT_ATOM_CAP || b.len() > EXACT_ATOM_CAP {
        return Err(Error::InstanceTooLarge {
            rows: a.len(),
            cols: b.len(),
            cap: EXACT_ATOM_CAP,
        });
    }
    let c = cost_matrix(a, b, cost)?;
    let plan = transport_simplex(a.weights(), b.weights(), &c);
    let objective = (&plan * &c).sum().max(0.0);
    Ok(ExactOt {
        value: cost.root(objective),
        objective,
        plan,
    })
}

/// Optimal plan for supplies `a`, demands `b` (equal totals) and cost `c`.
pub fn transport_simplex(a: &[f64], b: &[f64], c: &Array2<f64>) -> Array2<f64> {
    let (m, n) = (a.len(), b.len());
    assert_eq!(c.dim(), (m, n), "cost shape must match the marginals");
    let mut basis = northwest_corner(a, b);
    let scale = c.iter().fold(0.0f64, |s, v| s.max(v.abs())) + 1.0;
    let tol = 1e-12 * scale;

    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let mut degenerate_run = 0usize;
    let bland_after = 4 * (m + n);
    loop {
        potentials(&basis, c, m, n, &mut u, &mut v);
        let bland = degenerate_run > bland_after;
        let mut entering = None;
        let mut best = -tol;
        'scan: for i in 0..m {
            for j in 0..n {
                let d = c[[i, j]] - u[i] - v[j];
                if d < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = d;
                }
            }
        }
        let Some((ei, ej)) = entering else { break };

        let cycle = tree_path(&basis, m, n, ej, ei);
        // Cells on the path from column `ej` back to row `ei` alternate −, +, −, ...
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (t, &cell) in cycle.iter().enumerate() {
            if t % 2 == 0 {
                let x = basis[cell].2;
                let better = x < theta
                    || (x == theta && bland && key(basis[cell], n) < key(basis[leave], n));
                if better {
                    theta = x;
                    leave = cell;
                }
            }
        }
        for (t, &cell) in cycle.iter().enumerate() {
            if t % 2 == 0 {
                basis[cell].2 -= theta;
            } else {
                basis[cell].2 += theta;
            }
        }
        basis[leave] = (ei, ej, theta);
        degenerate_run = if theta > 0.0 { 0 } else { degenerate_run + 1 };
    }

    let mut plan = Array2::zeros((m, n));
    for &(i, j, x) in &basis {
        plan[[i, j]] += x.max(0.0);
    }
    plan
}

fn key(cell: (usize, usize, f64), n: usize) -> usize {
    cell.0 * n + cell.1
}

/// Initial basic feasible solution with exactly `m + n − 1` cells (degenerate zeros included).
fn northwest_corner(a: &[f64], b: &[f64]) -> Vec<(usize, usize, f64)> {
    let (m, n) = (a.len(), b.len());
    let mut cells = Vec::with_capacity(m + n - 1);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0], b[0]);
    loop {
        let x = ra.min(rb).max(0.0);
        cells.push((i, j, x));
        ra -= x;
        rb -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if j == n - 1 || (i < m - 1 && ra <= rb) {
            i += 1;
            ra = a[i];
        } else {
            j += 1;
            rb = b[j];
        }
    }
    cells
}

/// Solves `u_i + v_j = c_ij` on the basis tree with `u_0 = 0`.
fn potentials(
    basis: &[(usize, usize, f64)],
    c: &Array2<f64>,
    m: usize,
    n: usize,
    u: &mut [f64],
    v: &mut [f64],
) {
    let adj = adjacency(basis, m, n);
    let mut seen = vec![false; m + n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    u[0] = 0.0;
    while let Some(node) = queue.pop_front() {
        for &cell in &adj[node] {
            let (i, j, _) = basis[cell];
            let other = if node < m { m + j } else { i };
            if seen[other] {
                continue;
            }
            seen[other] = true;
            if node < m {
                v[j] = c[[i, j]] - u[i];
            } else {
                u[i] = c[[i, j]] - v[j];
            }
            queue.push_back(other);
        }
    }
}

fn adjacency(basis: &[(usize, usize, f64)], m: usize, n: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); m + n];
    for (k, &(i, j, _)) in basis.iter().enumerate() {
        adj[i].push(k);
        adj[m + j].push(k);
    }
    adj
}

/// Basis cells on the tree path from column node `col` to row node `row`.
fn tree_path(basis: &[(usize, usize, f64)], m: usize, n: usize, col: usize, row: usize) -> Vec<usize> {
    let adj = adjacency(basis, m, n);
    let start = m + col;
    let mut via = vec![usize::MAX; m + n];
    let mut seen = vec![false; m + n];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == row {
            break;
        }
        for &cell in &adj[node] {
            let (i, j, _) = basis[cell];
            let other = if node < m { m + j } else { i };
            if !seen[other] {
                seen[other] = true;
                via[other] = cell;
                queue.push_back(other);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = row;
    while node != start {
        let cell = via[node];
        path.push(cell);
        let (i, j, _) = basis[cell];
        node = if node < m { m + j } else { i };
    }
    path.reverse();
    path
}
