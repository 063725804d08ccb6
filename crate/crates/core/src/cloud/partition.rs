use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::spatial::Point3;

/// Grid used to cut a scene into blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    /// Square columns over the XY extent spanning the full height.
    #[default]
    Xy,
    /// Cubes over all three axes.
    Xyz,
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xy" => Ok(PartitionMode::Xy),
            "xyz" => Ok(PartitionMode::Xyz),
            other => Err(Error::contract(format!("unknown partition mode '{other}'"))),
        }
    }
}

/// A fixed-size sample of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Indices into the parent cloud.
    pub indices: Vec<usize>,
    /// Leading entries of `indices` that are distinct cell members; the rest
    /// are resampled padding.
    pub primary: usize,
    /// Minimum corner of the cell.
    pub origin: Point3,
    pub cell: [i64; 3],
}

struct Cell {
    key: [i64; 3],
    origin: Point3,
    members: Vec<usize>,
}

fn bin_cells(cloud: &PointCloud, cube_size: f64, mode: PartitionMode) -> Result<Vec<Cell>> {
    if cloud.is_empty() {
        return Err(Error::Degenerate("cannot partition an empty cloud".into()));
    }
    if !(cube_size > 0.0) {
        return Err(Error::contract("cube size must be positive"));
    }
    let mut lo = [f64::INFINITY; 3];
    for p in &cloud.xyz {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
        }
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.xyz.iter().enumerate() {
        let ix = ((p[0] - lo[0]) / cube_size).floor() as i64;
        let iy = ((p[1] - lo[1]) / cube_size).floor() as i64;
        let iz = match mode {
            PartitionMode::Xy => 0,
            PartitionMode::Xyz => ((p[2] - lo[2]) / cube_size).floor() as i64,
        };
        cells.entry([ix, iy, iz]).or_default().push(i);
    }
    Ok(cells
        .into_iter()
        .map(|(key, members)| Cell {
            key,
            origin: [
                lo[0] + key[0] as f64 * cube_size,
                lo[1] + key[1] as f64 * cube_size,
                lo[2] + key[2] as f64 * cube_size,
            ],
            members,
        })
        .collect())
}

/// One block per non-empty cell, each resampled to exactly `samples` points:
/// a uniform subset when the cell is large enough, otherwise every member
/// followed by uniform draws with replacement.
pub fn partition_blocks(
    cloud: &PointCloud,
    cube_size: f64,
    samples: usize,
    seed: u64,
    mode: PartitionMode,
) -> Result<Vec<Block>> {
    if samples == 0 {
        return Err(Error::contract("block sample count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = bin_cells(cloud, cube_size, mode)?;
    Ok(cells
        .into_iter()
        .map(|cell| {
            let n = cell.members.len();
            let (indices, primary) = if n >= samples {
                let picked = rand::seq::index::sample(&mut rng, n, samples);
                (picked.into_iter().map(|i| cell.members[i]).collect(), samples)
            } else {
                let mut idx = cell.members.clone();
                idx.extend((n..samples).map(|_| cell.members[rng.random_range(0..n)]));
                (idx, n)
            };
            Block {
                indices,
                primary,
                origin: cell.origin,
                cell: cell.key,
            }
        })
        .collect())
}

/// Blocks that cover every point exactly once in their primary part.
///
/// Each cell's members are shuffled and chunked into runs of `samples`; the
/// last run is padded with draws from the whole cell.
pub fn cover_blocks(
    cloud: &PointCloud,
    cube_size: f64,
    samples: usize,
    seed: u64,
    mode: PartitionMode,
) -> Result<Vec<Block>> {
    if samples == 0 {
        return Err(Error::contract("block sample count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = bin_cells(cloud, cube_size, mode)?;
    let mut blocks = Vec::new();
    for cell in cells {
        let mut order = cell.members.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(samples) {
            let mut indices = chunk.to_vec();
            let primary = indices.len();
            while indices.len() < samples {
                indices.push(cell.members[rng.random_range(0..cell.members.len())]);
            }
            blocks.push(Block {
                indices,
                primary,
                origin: cell.origin,
                cell: cell.key,
            });
        }
    }
    Ok(blocks)
}
