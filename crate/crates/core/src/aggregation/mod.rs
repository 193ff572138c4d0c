//! Server-side aggregation: plain averaging, conflict-averse encoder
//! aggregation, layer-wise cross attention for decoders and the hyper
//! weights that blend aggregated updates into each client's model.

mod conflict_averse;
mod cross_attention;
mod hyper;
mod simplex;

pub use conflict_averse::{
    conflict_averse_update, objective_f, solve_conflict_averse, weighted_update,
    ConflictAverseConfig, ConflictAverseSolution, Objective, NORM_GUARD,
};
pub use cross_attention::{aggregate_decoders, cross_attention_layer, AttentionOutput, DecoderKey};
pub use hyper::{
    apply_layerwise_update, apply_personalized_update, hyper_weight_delta, HyperConfig,
    HyperUpdateOrder, HyperWeights, LayerWeights, NORMALIZATION_EPS,
};
pub use simplex::{project_onto_simplex, SimplexWeights};

use crate::error::Result;
use crate::param::{self, FlatVector};

/// Elementwise mean of the updates.
pub fn fedavg(updates: &[FlatVector]) -> Result<FlatVector> {
    param::mean(updates)
}
