//! Finite-difference check of the full network's parameter gradients.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, BlockInput, ModelParams, NetworkConfig, NetworkParams};
use crate::error::Result;
use crate::spatial::Point3;
use crate::tensor::{Graph, Precision, Tensor};
use crate::train::init_params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub network: NetworkConfig,
    pub block_points: usize,
    /// Edge of the cube the random block is drawn from, in meters.
    pub extent: f64,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Gradients below this magnitude are compared absolutely.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            network: tiny_network(),
            block_points: 32,
            extent: 0.25,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
        }
    }
}

/// Smallest network exercising every module: two GPM layers, gated
/// enrichment and both attention branches.
pub fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        in_channels: 3,
        k: 3,
        enrich_radius: 0.06,
        layer_scales: vec![16, 8],
        layer_radii: vec![0.1, 0.2],
        group_sizes: vec![8, 8],
        channel_widths: vec![8, 16],
        gpm_enabled: vec![true, true],
        mlp_depth: 2,
        stack_depth: 2,
        decoder_widths: vec![16, 8],
        num_classes: 4,
        leaky_slope: 0.2,
        ablation: Default::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Entries where every tried step crossed a ReLU, max-pool or
    /// LeakyReLU branch boundary; excluded from `max_rel_error`.
    pub skipped_nonsmooth: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub elapsed_ms: f64,
}

/// Random labeled block inside a small cube.
pub fn random_block(cfg: &GradcheckConfig) -> Result<BlockInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let xyz: Vec<Point3> = (0..cfg.block_points)
        .map(|_| [0; 3].map(|_| rng.random_range(0.0..cfg.extent)))
        .collect();
    let feats = Tensor::new(vec![xyz.len(), 3], xyz.iter().flatten().copied().collect())?;
    let labels = (0..xyz.len()).map(|_| rng.random_range(0..cfg.network.num_classes)).collect();
    BlockInput::from_points(xyz, feats, Some(labels), &cfg.network)
}

/// Step fractions tried in turn until neither side crosses a branch
/// boundary. Smaller steps than `step / 20` drown in rounding noise.
const SHRINKS: [f64; 5] = [1.0, 0.5, 0.25, 0.1, 0.05];

/// Loss and branch signature of one forward pass.
fn loss_of(params: &ModelParams, net: &NetworkConfig, input: &BlockInput) -> Result<(f64, u64)> {
    let mut g = Graph::new(Precision::F64);
    let bound = params.bind(&mut g);
    let vars = NetworkParams::bind(&bound, net)?;
    let out = forward(&mut g, &vars, net, input, None)?;
    let labels = input.labels.as_deref().expect("random block is labeled");
    let loss = g.cross_entropy(out.logits, labels)?;
    Ok((g.scalar_value(loss).expect("scalar"), g.branch_signature()))
}

/// Compares every analytic parameter gradient against central differences.
/// The error of one entry is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let net = &cfg.network;
    let input = random_block(cfg)?;
    let mut params = init_params(net, cfg.seed)?;

    let mut g = Graph::new(Precision::F64);
    let bound = params.bind(&mut g);
    let vars = NetworkParams::bind(&bound, net)?;
    let out = forward(&mut g, &vars, net, &input, None)?;
    let loss = g.cross_entropy(out.logits, input.labels.as_deref().expect("labeled"))?;
    let grads = g.backward(loss)?;
    let base_sig = g.branch_signature();
    let analytic: Vec<(String, Vec<f64>)> = bound
        .iter()
        .map(|(name, v)| (name.to_string(), grads.get(v).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect();

    let mut report = GradcheckReport {
        checked: 0,
        skipped_nonsmooth: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tolerance: cfg.tolerance,
        passed: false,
        elapsed_ms: 0.0,
    };
    for (name, grad) in &analytic {
        let len = params.get(name).expect("bound name").len();
        for i in 0..len {
            let orig = params.get(name).expect("bound name").data()[i];
            let mut numeric = None;
            for shrink in SHRINKS {
                let h = cfg.step * shrink;
                params.get_mut(name).expect("bound name").data_mut()[i] = orig + h;
                let (up, sig_up) = loss_of(&params, net, &input)?;
                params.get_mut(name).expect("bound name").data_mut()[i] = orig - h;
                let (down, sig_down) = loss_of(&params, net, &input)?;
                params.get_mut(name).expect("bound name").data_mut()[i] = orig;
                if sig_up == base_sig && sig_down == base_sig {
                    numeric = Some((up - down) / (2.0 * h));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.skipped_nonsmooth += 1;
                continue;
            };
            let a = grad.get(i).copied().unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tolerance;
    report.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}
