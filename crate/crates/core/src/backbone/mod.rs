//! Hierarchical encoder/decoder with lateral connections.
//!
//! Each encoder layer samples centroids by farthest point sampling, groups
//! ball-query neighborhoods around them, prepends member coordinates
//! relative to the centroid and pools the group through a GPM or a plain
//! MLP. The decoder walks back from the coarsest level, interpolating onto
//! the next finer point set and concatenating that level's features before
//! an FC + ReLU unit.

mod config;
mod network;
mod params;

pub use config::{Ablation, NetworkConfig, Variant};
pub use network::{
    decode, encode, enrich, forward, infer_logits, predict_block, BlockGeometry, BlockInput, ForwardOutput, LayerParams,
    LevelGeometry, NetworkParams, StageTimings,
};
pub use params::ModelParams;
