//! Point-cloud semantic segmentation with contextual enrichment, graph
//! attention over local groups and a spatial/channel attention head.

pub mod backbone;
pub mod cloud;
pub mod config;
pub mod enrichment;
pub mod error;
pub mod gpm;
pub mod gradcheck;
pub mod head;
pub mod nn;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
