//! Causal optimal transport objective.

mod objective;
pub mod sinkhorn;

pub use objective::{
    adversarial_losses, base_cost, causal_cost, increments, martingale_penalty, mixed_divergence,
    pair_cost, sinkhorn_value, Losses, Side,
};
pub use sinkhorn::{SinkhornConfig, SinkhornSolution};
