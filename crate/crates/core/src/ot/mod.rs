//! Optimal transport between refined prototypes and the normal bank.
//!
//! Marginals are always uniform: rows carry mass `1/m`, columns `1/n`.

mod cost;
mod exact;
mod sinkhorn;

pub use cost::{cost_matrix, CostMatrix, CostMode};
pub use exact::{exact_ot_small, ExactOt, MAX_EXACT_DIM};
pub(crate) use sinkhorn::linear_cost;
pub use sinkhorn::{
    auto_epsilon, entropic_value, sinkhorn, SinkhornConfig, SinkhornOutput, TransportPlan,
    AUTO_EPSILON_SCALE,
};
