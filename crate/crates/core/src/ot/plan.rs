//! Grid transport plans and their entropies.
//!
//! A grid plan over `n` exogenous coordinates has `2n` axes: axis `k < n`
//! carries the distinct source values of coordinate `k`, axis `n + k` the
//! target values. Mass is stored row-major in an `ArrayD` of standard layout.
//! Negentropy is `H(π) = Σ π log π` with `0 log 0 = 0`, so that
//! `KL(π ‖ π⊗) = H(π) − Σ_i H_i(π) ≥ 0`, where `H_i` is the negentropy of the
//! pair marginal on axes `(i, n + i)`.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::Serialize;

use crate::dist::Marginal;
use crate::error::{Error, Result};

#[inline]
pub(crate) fn xlogx(m: f64) -> f64 {
    if m > 0.0 {
        m * m.ln()
    } else {
        0.0
    }
}

/// Splits a row-major index space around axis `k` into `(outer, len, inner)` blocks.
#[inline]
pub(crate) fn blocks(shape: &[usize], k: usize) -> (usize, usize, usize) {
    let outer = shape[..k].iter().product();
    let inner = shape[k + 1..].iter().product();
    (outer, shape[k], inner)
}

pub(crate) fn axis_sums(data: &[f64], shape: &[usize], k: usize) -> Vec<f64> {
    let (outer, len, inner) = blocks(shape, k);
    let mut out = vec![0.0; len];
    for o in 0..outer {
        for (x, acc) in out.iter_mut().enumerate() {
            let base = (o * len + x) * inner;
            *acc += data[base..base + inner].iter().sum::<f64>();
        }
    }
    out
}

/// Log-sum-exp of a log tensor over every axis except `k`.
pub(crate) fn axis_logsumexp(data: &[f64], shape: &[usize], k: usize) -> Vec<f64> {
    let (outer, len, inner) = blocks(shape, k);
    let mut peak = vec![f64::NEG_INFINITY; len];
    for o in 0..outer {
        for (x, m) in peak.iter_mut().enumerate() {
            let base = (o * len + x) * inner;
            for &v in &data[base..base + inner] {
                if v > *m {
                    *m = v;
                }
            }
        }
    }
    let mut sum = vec![0.0; len];
    for o in 0..outer {
        for x in 0..len {
            let m = peak[x];
            if m == f64::NEG_INFINITY {
                continue;
            }
            let base = (o * len + x) * inner;
            sum[x] += data[base..base + inner].iter().map(|&v| (v - m).exp()).sum::<f64>();
        }
    }
    peak.iter()
        .zip(&sum)
        .map(|(&m, &s)| if m == f64::NEG_INFINITY { m } else { m + s.ln() })
        .collect()
}

pub(crate) fn add_along_axis(data: &mut [f64], shape: &[usize], k: usize, delta: &[f64]) {
    let (outer, len, inner) = blocks(shape, k);
    for o in 0..outer {
        for (x, &d) in delta.iter().enumerate().take(len) {
            let base = (o * len + x) * inner;
            for v in &mut data[base..base + inner] {
                *v += d;
            }
        }
    }
}

/// Calls `f(index, flat)` for every multi-index of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize], usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..total {
        f(&idx, flat);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums of `data` over all axes but `i` and `j`.
pub(crate) fn pair_sums(data: &[f64], shape: &[usize], i: usize, j: usize) -> Array2<f64> {
    let mut out = Array2::zeros((shape[i], shape[j]));
    for_each_index(shape, |idx, flat| out[[idx[i], idx[j]]] += data[flat]);
    out
}

/// Tensor with entries `Π_i pairs[i][u_i, v_i]` on a `2n`-axis grid.
pub(crate) fn product_of_pairs(shape: &[usize], pairs: &[Array2<f64>]) -> ArrayD<f64> {
    let n = pairs.len();
    let mut out = vec![0.0; shape.iter().product()];
    for_each_index(shape, |idx, flat| {
        let mut v = 1.0;
        for (i, m) in pairs.iter().enumerate() {
            v *= m[[idx[i], idx[n + i]]];
        }
        out[flat] = v;
    });
    ArrayD::from_shape_vec(IxDyn(shape), out).expect("shape matches data")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    /// Joint negentropy `Σ π log π`.
    pub h: f64,
    /// Negentropy of each coordinate-pair marginal.
    pub h_pairs: Vec<f64>,
    /// `h − Σ h_pairs`, floored at zero where cancellation would leave it slightly negative.
    pub kl_to_product: f64,
}

/// Mass tensor on a `2n`-axis grid together with the axis values and target marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    axes: Vec<Marginal>,
    mass: ArrayD<f64>,
}

impl TransportPlan {
    /// `axes[k]` gives the support and target weights of axis `k`; `mass` must match in shape.
    pub fn new(axes: Vec<Marginal>, mass: ArrayD<f64>) -> Result<Self> {
        if axes.is_empty() || !axes.len().is_multiple_of(2) {
            return Err(Error::invalid("axes", "a grid plan needs an even, positive axis count"));
        }
        let shape: Vec<usize> = axes.iter().map(Marginal::len).collect();
        if mass.shape() != shape.as_slice() {
            return Err(Error::DimensionMismatch {
                expected: shape.iter().product(),
                got: mass.len(),
            });
        }
        if mass.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::invalid("mass", "plan entries must be finite and >= 0"));
        }
        let mass = mass.as_standard_layout().into_owned();
        Ok(TransportPlan { axes, mass })
    }

    /// Wraps a raw tensor: axis values are indices and targets are the tensor's own marginals.
    pub fn from_tensor(mass: ArrayD<f64>) -> Result<Self> {
        let mass = mass.as_standard_layout().into_owned();
        let shape = mass.shape().to_vec();
        let data = mass.as_slice().expect("standard layout");
        let axes = (0..shape.len())
            .map(|k| {
                let sums = axis_sums(data, &shape, k);
                Marginal::from_weighted((0..shape[k]).map(|x| x as f64), sums)
            })
            .collect::<Vec<_>>();
        if axes.iter().zip(&shape).any(|(m, &s)| m.len() != s) {
            return Err(Error::invalid("mass", "every axis value needs positive mass"));
        }
        TransportPlan::new(axes, mass)
    }

    /// Product of the axis targets: every axis independent.
    pub fn independent(axes: Vec<Marginal>) -> Result<Self> {
        let shape: Vec<usize> = axes.iter().map(Marginal::len).collect();
        let mut data = vec![0.0; shape.iter().product()];
        for_each_index(&shape, |idx, flat| {
            data[flat] = idx
                .iter()
                .zip(&axes)
                .map(|(&x, m)| m.weights()[x])
                .product();
        });
        let mass = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape matches data");
        TransportPlan::new(axes, mass)
    }

    pub(crate) fn from_parts(axes: Vec<Marginal>, mass: ArrayD<f64>) -> Self {
        debug_assert!(mass.is_standard_layout());
        TransportPlan { axes, mass }
    }

    /// Number of exogenous coordinates (half the axis count).
    pub fn n(&self) -> usize {
        self.axes.len() / 2
    }

    pub fn axes(&self) -> &[Marginal] {
        &self.axes
    }

    pub fn mass(&self) -> &ArrayD<f64> {
        &self.mass
    }

    pub fn shape(&self) -> &[usize] {
        self.mass.shape()
    }

    pub(crate) fn data(&self) -> &[f64] {
        self.mass.as_slice().expect("standard layout")
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.sum()
    }

    pub fn axis_marginal(&self, k: usize) -> Vec<f64> {
        axis_sums(self.data(), self.shape(), k)
    }

    /// L1 distance between each axis marginal and its target.
    pub fn axis_residuals(&self) -> Vec<f64> {
        (0..self.axes.len())
            .map(|k| {
                self.axis_marginal(k)
                    .iter()
                    .zip(self.axes[k].weights())
                    .map(|(a, b)| (a - b).abs())
                    .sum()
            })
            .collect()
    }

    /// Mass on axes `(i, n + i)` summed over all others.
    pub fn pair_marginal(&self, i: usize) -> Result<Array2<f64>> {
        let n = self.n();
        if i >= n {
            return Err(Error::AxisOutOfRange { axis: i, count: n });
        }
        Ok(pair_sums(self.data(), self.shape(), i, n + i))
    }

    pub fn pair_marginals(&self) -> Vec<Array2<f64>> {
        (0..self.n())
            .map(|i| self.pair_marginal(i).expect("index in range"))
            .collect()
    }

    pub fn negentropy(&self) -> f64 {
        self.mass.iter().map(|&m| xlogx(m)).sum()
    }

    pub fn entropy_report(&self) -> EntropyReport {
        let h = self.negentropy();
        let h_pairs: Vec<f64> = self
            .pair_marginals()
            .iter()
            .map(|m| m.iter().map(|&v| xlogx(v)).sum())
            .collect();
        let kl_to_product = (h - h_pairs.iter().sum::<f64>()).max(0.0);
        EntropyReport {
            h,
            h_pairs,
            kl_to_product,
        }
    }

    /// `Σ π log(π / π⊗)` evaluated entry by entry.
    pub fn kl_direct(&self) -> f64 {
        let prod = self.pi_otimes_mass();
        self.mass
            .iter()
            .zip(prod.iter())
            .map(|(&m, &q)| if m > 0.0 { m * (m / q).ln() } else { 0.0 })
            .sum()
    }

    /// Product of the pair marginals, as a tensor on the same grid.
    pub(crate) fn pi_otimes_mass(&self) -> ArrayD<f64> {
        product_of_pairs(self.shape(), &self.pair_marginals())
    }

    /// `⟨C, π⟩` against a cost tensor of the same shape.
    pub fn transport_cost(&self, cost: &ArrayD<f64>) -> f64 {
        self.mass.iter().zip(cost.iter()).map(|(m, c)| m * c).sum()
    }
}
