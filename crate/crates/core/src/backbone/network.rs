use std::time::{Duration, Instant};

use crate::cloud::{Block, PointCloud};
use crate::enrichment::{concat_fuse, contextual_representation, gated_fuse, EnrichmentParams};
use crate::error::{Error, Result};
use crate::gpm::{gpm_forward, mlp_pool_forward, GpmParams};
use crate::head::{classify, predict_labels, HeadParams};
use crate::nn::{Bound, Linear, Mlp};
use crate::spatial::{ball_group, farthest_point_sample, interpolation_weights, knn, GroupingResult, NeighborList, Point3};
use crate::tensor::{Graph, MixWeights, Precision, Tensor, Var};

use super::{ModelParams, NetworkConfig};

/// Sampling and grouping of one encoder layer.
#[derive(Debug, Clone)]
pub struct LevelGeometry {
    /// Centroid coordinates produced by this layer.
    pub xyz: Vec<Point3>,
    pub groups: GroupingResult,
    /// Member coordinates relative to their centroid, `[scale · group, 3]`.
    pub rel_xyz: Tensor,
}

/// Everything about a block that depends only on its coordinates.
#[derive(Debug, Clone)]
pub struct BlockGeometry {
    pub neighbors: NeighborList,
    pub levels: Vec<LevelGeometry>,
    /// `upsample[l]` interpolates level `l + 1` features onto level `l`
    /// points (level 0 being the block itself).
    pub upsample: Vec<MixWeights>,
}

impl BlockGeometry {
    pub fn build(xyz: &[Point3], config: &NetworkConfig) -> Result<Self> {
        config.validate_for_block(xyz.len())?;
        let neighbors = knn(xyz, xyz, config.k, config.enrich_radius)?;
        let mut levels: Vec<LevelGeometry> = Vec::with_capacity(config.num_layers());
        let mut upsample = Vec::with_capacity(config.num_layers());
        for l in 0..config.num_layers() {
            let prev: &[Point3] = if l == 0 { xyz } else { &levels[l - 1].xyz };
            let centroids = farthest_point_sample(prev, config.layer_scales[l], None)?;
            let groups = ball_group(prev, &centroids, config.layer_radii[l], config.group_sizes[l])?;
            let cxyz: Vec<Point3> = centroids.iter().map(|&i| prev[i]).collect();
            let mut rel = Vec::with_capacity(groups.members.len() * 3);
            for (c, centre) in cxyz.iter().enumerate() {
                for &m in groups.group(c) {
                    for a in 0..3 {
                        rel.push(prev[m][a] - centre[a]);
                    }
                }
            }
            let rel_xyz = Tensor::new(vec![groups.members.len(), 3], rel)?;
            upsample.push(interpolation_weights(&cxyz, prev)?);
            levels.push(LevelGeometry {
                xyz: cxyz,
                groups,
                rel_xyz,
            });
        }
        Ok(Self {
            neighbors,
            levels,
            upsample,
        })
    }
}

/// A network-ready block.
#[derive(Debug, Clone)]
pub struct BlockInput {
    pub xyz: Vec<Point3>,
    /// `[S, C_f]`: coordinates relative to the block origin, then attributes.
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub geometry: BlockGeometry,
    /// Source index in the parent cloud of every row.
    pub indices: Vec<usize>,
    /// Leading rows that are distinct points; the rest is padding.
    pub primary: usize,
}

impl BlockInput {
    pub fn from_block(cloud: &PointCloud, block: &Block, config: &NetworkConfig) -> Result<Self> {
        if cloud.feature_width() != config.in_channels {
            return Err(Error::contract(format!(
                "cloud has {} feature channels, network expects {}",
                cloud.feature_width(),
                config.in_channels
            )));
        }
        let xyz: Vec<Point3> = block.indices.iter().map(|&i| cloud.xyz[i]).collect();
        let mut feats = Vec::with_capacity(xyz.len() * config.in_channels);
        for (p, &i) in xyz.iter().zip(&block.indices) {
            for a in 0..3 {
                feats.push(p[a] - block.origin[a]);
            }
            feats.extend_from_slice(cloud.attrs_of(i));
        }
        let features = Tensor::new(vec![xyz.len(), config.in_channels], feats)?;
        let labels = cloud
            .labels
            .as_ref()
            .map(|l| block.indices.iter().map(|&i| l[i]).collect());
        let geometry = BlockGeometry::build(&xyz, config)?;
        Ok(Self {
            xyz,
            features,
            labels,
            geometry,
            indices: block.indices.clone(),
            primary: block.primary,
        })
    }

    pub fn from_points(
        xyz: Vec<Point3>,
        features: Tensor,
        labels: Option<Vec<usize>>,
        config: &NetworkConfig,
    ) -> Result<Self> {
        if features.shape() != [xyz.len(), config.in_channels] {
            return Err(Error::dim("from_points", features.shape(), &[xyz.len(), config.in_channels]));
        }
        if labels.as_ref().is_some_and(|l| l.len() != xyz.len()) {
            return Err(Error::contract("label count does not match point count"));
        }
        let geometry = BlockGeometry::build(&xyz, config)?;
        let n = xyz.len();
        Ok(Self {
            xyz,
            features,
            labels,
            geometry,
            indices: (0..n).collect(),
            primary: n,
        })
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }
}

#[derive(Debug, Clone)]
pub enum LayerParams {
    Gpm(GpmParams),
    Mlp(Mlp),
}

/// Parameter handles of the whole network inside one graph.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub enrich: Option<EnrichmentParams>,
    pub layers: Vec<LayerParams>,
    pub decoder: Vec<Linear>,
    pub head: HeadParams,
}

impl NetworkParams {
    pub fn bind(bound: &Bound, config: &NetworkConfig) -> Result<Self> {
        let a = config.ablation;
        let enrich = if a.disable_cr || a.concat_cr {
            None
        } else {
            Some(EnrichmentParams::bind(bound, "enrich")?)
        };
        let layers = (0..config.num_layers())
            .map(|l| {
                let prefix = format!("enc{l}");
                Ok(if config.gpm_active(l) {
                    LayerParams::Gpm(GpmParams::bind(bound, &prefix, config.mlp_depth, config.stack_depth)?)
                } else {
                    LayerParams::Mlp(Mlp::bind(bound, &prefix, config.mlp_depth)?)
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..config.num_layers())
            .map(|i| Linear::bind(bound, &format!("dec{i}")))
            .collect::<Result<_>>()?;
        let head = HeadParams::bind(bound, "head", config.attention_enabled())?;
        Ok(Self {
            enrich,
            layers,
            decoder,
            head,
        })
    }
}

/// Optional per-stage wall-clock recorder.
#[derive(Debug, Default, Clone)]
pub struct StageTimings {
    pub stages: Vec<(String, Duration)>,
}

impl StageTimings {
    fn record(timings: &mut Option<&mut StageTimings>, name: impl Into<String>, since: Instant) {
        if let Some(t) = timings.as_deref_mut() {
            t.stages.push((name.into(), since.elapsed()));
        }
    }
}

/// Contextual enrichment of the raw block features.
pub fn enrich(g: &mut Graph, params: &NetworkParams, config: &NetworkConfig, feats: Var, neighbors: &NeighborList) -> Result<Var> {
    if config.ablation.disable_cr {
        return Ok(feats);
    }
    let r = contextual_representation(g, feats, neighbors)?;
    match &params.enrich {
        Some(e) => gated_fuse(g, feats, r, e),
        None => concat_fuse(g, feats, r),
    }
}

/// Runs the encoder. Element 0 of the result is the enriched input and
/// element `l + 1` the output of layer `l`, aligned with
/// `geometry.levels[l].xyz`.
pub fn encode(
    g: &mut Graph,
    params: &NetworkParams,
    config: &NetworkConfig,
    geometry: &BlockGeometry,
    enriched: Var,
    mut timings: Option<&mut StageTimings>,
) -> Result<Vec<Var>> {
    if g.shape(enriched)[0] != geometry.neighbors.len() {
        return Err(Error::dim("encode", g.shape(enriched), &[geometry.neighbors.len(), config.enriched_width()]));
    }
    let mut levels = vec![enriched];
    for (l, (layer, geo)) in params.layers.iter().zip(&geometry.levels).enumerate() {
        let start = Instant::now();
        let prev = levels[l];
        let gathered = g.gather_rows(prev, &geo.groups.members)?;
        let rel = g.constant(&geo.rel_xyz);
        let grouped = g.concat_cols(&[rel, gathered])?;
        let scale = geo.xyz.len();
        let pooled = match layer {
            LayerParams::Gpm(p) => gpm_forward(g, grouped, scale, p, config.leaky_slope)?.pooled,
            LayerParams::Mlp(m) => mlp_pool_forward(g, grouped, scale, m)?,
        };
        levels.push(pooled);
        StageTimings::record(&mut timings, format!("encoder.layer{l}"), start);
    }
    Ok(levels)
}

/// Upsamples from the coarsest level back to the block points, joining each
/// finer level's features through a lateral concatenation.
pub fn decode(
    g: &mut Graph,
    params: &NetworkParams,
    config: &NetworkConfig,
    geometry: &BlockGeometry,
    levels: &[Var],
) -> Result<Var> {
    let depth = config.num_layers();
    if levels.len() != depth + 1 || geometry.upsample.len() != depth || params.decoder.len() != depth {
        return Err(Error::contract(format!(
            "decoder needs {} encoder levels, got {}",
            depth + 1,
            levels.len()
        )));
    }
    let mut current = levels[depth];
    for (i, fc) in params.decoder.iter().enumerate() {
        let l = depth - 1 - i;
        let up = g.mix_rows(current, &geometry.upsample[l])?;
        let joined = g.concat_cols(&[up, levels[l]])?;
        let h = fc.forward(g, joined)?;
        current = g.relu(h);
    }
    Ok(current)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Decoder output `[S, C_d]`.
    pub features: Var,
    pub levels: Vec<Var>,
}

pub fn forward(
    g: &mut Graph,
    params: &NetworkParams,
    config: &NetworkConfig,
    input: &BlockInput,
    mut timings: Option<&mut StageTimings>,
) -> Result<ForwardOutput> {
    let start = Instant::now();
    let feats = g.constant(&input.features);
    let enriched = enrich(g, params, config, feats, &input.geometry.neighbors)?;
    StageTimings::record(&mut timings, "enrichment", start);
    let levels = encode(g, params, config, &input.geometry, enriched, timings.as_deref_mut())?;
    let start = Instant::now();
    let features = decode(g, params, config, &input.geometry, &levels)?;
    StageTimings::record(&mut timings, "decoder", start);
    let start = Instant::now();
    let logits = classify(g, features, &params.head)?;
    StageTimings::record(&mut timings, "head", start);
    Ok(ForwardOutput {
        logits,
        features,
        levels,
    })
}

/// Forward pass outside of training: logits `[S, num_classes]`.
pub fn infer_logits(params: &ModelParams, config: &NetworkConfig, input: &BlockInput, precision: Precision) -> Result<Tensor> {
    let mut g = Graph::new(precision);
    let bound = params.bind(&mut g);
    let net = NetworkParams::bind(&bound, config)?;
    let out = forward(&mut g, &net, config, input, None)?;
    Ok(g.to_tensor(out.logits))
}

pub fn predict_block(params: &ModelParams, config: &NetworkConfig, input: &BlockInput, precision: Precision) -> Result<Vec<usize>> {
    let logits = infer_logits(params, config, input, precision)?;
    Ok(predict_labels(logits.data(), config.num_classes))
}
