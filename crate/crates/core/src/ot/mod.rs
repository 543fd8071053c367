//! Discrete optimal transport: ground costs, an exact oracle, closed forms in
//! one dimension, entropic Sinkhorn solvers and grid-plan entropies.

mod assignment;
mod cost;
mod exact;
mod one_d;
pub(crate) mod plan;
mod sinkhorn;

pub use assignment::assignment;
pub use cost::{cost_matrix, CostSpec};
pub use exact::{exact_ot, transport_simplex, ExactOt, EXACT_ATOM_CAP};
pub use one_d::{factored_wasserstein, factored_wasserstein_pow, wasserstein_1d, wasserstein_1d_pow};
pub use plan::{EntropyReport, TransportPlan};
pub use sinkhorn::{
    sinkhorn, sinkhorn_matrix, sinkhorn_multimarginal, sinkhorn_multimarginal_log,
    sinkhorn_multimarginal_scaled,
    MultiSinkhornResult, SinkhornResult,
};
