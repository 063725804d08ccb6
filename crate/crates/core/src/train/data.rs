use serde::{Deserialize, Serialize};

use super::{derive_seed, Confusion, MetricsReport, STREAM_PARTITION};
use crate::backbone::{predict_block, BlockInput, ModelParams, NetworkConfig};
use crate::cloud::{cover_blocks, partition_blocks, PartitionMode, PointCloud};
use crate::error::{Error, Result};
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Edge length of the partition cells in meters.
    pub cube_size: f64,
    /// Points per block.
    pub block_points: usize,
    pub partition: PartitionMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cube_size: 1.0,
            block_points: 4096,
            partition: PartitionMode::Xy,
        }
    }
}

/// Partitions a labeled cloud into training blocks.
pub fn prepare_dataset(cloud: &PointCloud, data: &DataConfig, net: &NetworkConfig, seed: u64) -> Result<Vec<BlockInput>> {
    cloud.validate(Some(net.num_classes))?;
    if cloud.labels.is_none() {
        return Err(Error::contract("training cloud has no labels"));
    }
    net.validate_for_block(data.block_points)?;
    let blocks = partition_blocks(
        cloud,
        data.cube_size,
        data.block_points,
        derive_seed(seed, STREAM_PARTITION),
        data.partition,
    )?;
    blocks.iter().map(|b| BlockInput::from_block(cloud, b, net)).collect()
}

/// Labels every point of the cloud, visiting each one exactly once as a
/// primary block member.
pub fn predict_cloud(
    params: &ModelParams,
    net: &NetworkConfig,
    data: &DataConfig,
    cloud: &PointCloud,
    seed: u64,
    precision: Precision,
) -> Result<Vec<usize>> {
    cloud.validate(None)?;
    net.validate_for_block(data.block_points)?;
    params.check_layout(&net.param_layout())?;
    let blocks = cover_blocks(
        cloud,
        data.cube_size,
        data.block_points,
        derive_seed(seed, STREAM_PARTITION),
        data.partition,
    )?;
    let mut out = vec![usize::MAX; cloud.len()];
    for block in &blocks {
        let input = BlockInput::from_block(cloud, block, net)?;
        let pred = predict_block(params, net, &input, precision)?;
        for (&i, &p) in block.indices[..block.primary].iter().zip(&pred) {
            out[i] = p;
        }
    }
    debug_assert!(out.iter().all(|&p| p != usize::MAX));
    Ok(out)
}

/// Metrics over the primary points of prepared blocks.
pub fn evaluate_dataset(
    params: &ModelParams,
    net: &NetworkConfig,
    dataset: &[BlockInput],
    precision: Precision,
) -> Result<MetricsReport> {
    let mut confusion = Confusion::new(net.num_classes);
    for input in dataset {
        let labels = input
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract("evaluation block has no labels"))?;
        let pred = predict_block(params, net, input, precision)?;
        confusion.add(&pred[..input.primary], &labels[..input.primary])?;
    }
    Ok(confusion.report())
}
