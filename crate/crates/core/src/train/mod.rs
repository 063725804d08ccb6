//! Loss, optimizers, metrics, the training loop and the evaluation
//! harnesses.

mod data;
mod harness;
mod metrics;
mod optim;

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hasher};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, BlockInput, ModelParams, NetworkConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::head::predict_labels;
use crate::tensor::{Graph, Precision, Var};

pub use data::{evaluate_dataset, predict_cloud, prepare_dataset, DataConfig};
pub use harness::{
    format_ablation_table, run_ablation, run_robustness, AblationRow, Perturbation, RobustnessEntry, RobustnessReport,
};
pub use metrics::{evaluate, Confusion, MetricsReport};
pub use optim::{sgd_step, Adam, Optimizer, OptimizerKind};

pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub precision: Precision,
    /// Worker threads for the blocks of one batch. Results do not depend
    /// on this value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: DEFAULT_SEED,
            precision: Precision::F64,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(Error::contract("epochs, batch_size and threads must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::contract("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Independent seed for a named random stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_ORDER: u64 = 2;
pub(crate) const STREAM_PARTITION: u64 = 3;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean block loss over the epoch.
    pub loss: f64,
    /// Metrics of the predictions made during the epoch, on primary points.
    pub oa: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// Hash of the block index stream over all epochs.
    pub order_hash: u64,
    /// Epochs at which the 10-epoch moving-average loss went up.
    pub loss_increases: Vec<usize>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.loss)
    }
}

/// Mean cross-entropy of `[n×C]` logits, registered on the graph.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

pub fn init_params(net: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    net.validate()?;
    ModelParams::init(&net.param_layout(), derive_seed(seed, STREAM_INIT))
}

struct BlockStep {
    loss: f64,
    grads: Vec<Vec<f64>>,
    pred: Vec<usize>,
}

fn block_step(params: &ModelParams, names: &[String], net: &NetworkConfig, input: &BlockInput, precision: Precision) -> Result<BlockStep> {
    let labels = input
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("training block has no labels"))?;
    let mut g = Graph::new(precision);
    let bound = params.bind(&mut g);
    let vars = NetworkParams::bind(&bound, net)?;
    let out = forward(&mut g, &vars, net, input, None)?;
    let loss = cross_entropy_loss(&mut g, out.logits, labels)?;
    let value = g.scalar_value(loss).expect("loss is scalar");
    if !value.is_finite() {
        let culprit = g
            .first_non_finite()
            .map_or_else(|| "none recorded".to_string(), |r| r.to_string());
        return Err(Error::NonFinite(format!("loss is {value}; first non-finite tensor: {culprit}")));
    }
    let mut grads = g.backward(loss)?;
    let grads = names
        .iter()
        .map(|name| {
            let v = bound.get(name)?;
            grads
                .take(v)
                .ok_or_else(|| Error::contract(format!("parameter '{name}' is not reachable from the loss")))
        })
        .collect::<Result<_>>()?;
    let pred = predict_labels(&g.value(out.logits)[..input.primary * net.num_classes], net.num_classes);
    Ok(BlockStep { loss: value, grads, pred })
}

fn run_batch(
    params: &ModelParams,
    names: &[String],
    net: &NetworkConfig,
    blocks: &[&BlockInput],
    cfg: &TrainConfig,
) -> Result<Vec<BlockStep>> {
    if cfg.threads <= 1 || blocks.len() <= 1 {
        return blocks.iter().map(|b| block_step(params, names, net, b, cfg.precision)).collect();
    }
    let per = blocks.len().div_ceil(cfg.threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = blocks
            .chunks(per)
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|b| block_step(params, names, net, b, cfg.precision))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(blocks.len());
        for h in handles {
            out.extend(h.join().expect("training worker panicked")?);
        }
        Ok(out)
    })
}

/// Epochs (1-based) at which the trailing 10-epoch mean loss exceeded the
/// previous window's.
pub fn loss_increases(log: &[EpochRecord]) -> Vec<usize> {
    const W: usize = 10;
    if log.len() <= W {
        return Vec::new();
    }
    let ma: Vec<f64> = log.windows(W).map(|w| w.iter().map(|r| r.loss).sum::<f64>() / W as f64).collect();
    ma.windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0])
        .map(|(i, _)| log[i + W].epoch)
        .collect()
}

pub fn train(dataset: &[BlockInput], net: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = init_params(net, cfg.seed)?;
    train_from(dataset, net, cfg, init, &mut |_| {})
}

/// Trains from explicit initial parameters, reporting each epoch to
/// `on_epoch` as soon as it completes.
pub fn train_from(
    dataset: &[BlockInput],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    mut params: ModelParams,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    params.check_layout(&net.param_layout())?;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ORDER));
    let mut hasher = DefaultHasher::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        for &i in &order {
            hasher.write_usize(i);
        }
        let mut confusion = Confusion::new(net.num_classes);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let blocks: Vec<&BlockInput> = batch.iter().map(|&i| &dataset[i]).collect();
            let steps = run_batch(&params, &names, net, &blocks, cfg)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                    e => e,
                })?;
            let scale = 1.0 / steps.len() as f64;
            let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for (step, block) in steps.iter().zip(&blocks) {
                loss_sum += step.loss;
                let labels = block.labels.as_ref().expect("checked in block_step");
                confusion.add(&step.pred, &labels[..block.primary])?;
                for (name, g) in names.iter().zip(&step.grads) {
                    let a = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                    for (a, g) in a.iter_mut().zip(g) {
                        *a += g * scale;
                    }
                }
            }
            for (name, g) in acc {
                params.get_mut(name).expect("known name").set_grad(g)?;
            }
            optimizer.step(&mut params)?;
            if cfg.precision == Precision::F32 {
                params.round_to_f32();
            }
        }
        params.clear_grads();
        let report = confusion.report();
        let record = EpochRecord {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            oa: report.oa,
            miou: report.miou,
            per_class_iou: report.per_class_iou,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&record);
        log.push(record);
    }
    params.round_to_f32();
    if !params.is_finite() {
        return Err(Error::NonFinite("trained parameters contain non-finite values".into()));
    }
    let loss_increases = loss_increases(&log);
    Ok(TrainOutcome {
        params,
        log,
        order_hash: hasher.finish(),
        loss_increases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, loss: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            loss,
            oa: 0.0,
            miou: 0.0,
            per_class_iou: vec![],
            wall_ms: 0.0,
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut g = Graph::new(Precision::F64);
        let logits = g.constant(&crate::tensor::Tensor::zeros(vec![3, 4]).unwrap());
        let loss = cross_entropy_loss(&mut g, logits, &[0, 1, 3]).unwrap();
        assert!((g.scalar_value(loss).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_small_loss() {
        let mut g = Graph::new(Precision::F64);
        let mut data = vec![0.0; 8];
        data[1] = 10.0;
        data[4 + 2] = 10.0;
        let logits = g.constant(&crate::tensor::Tensor::new(vec![2, 4], data).unwrap());
        let loss = cross_entropy_loss(&mut g, logits, &[1, 2]).unwrap();
        assert!(g.scalar_value(loss).unwrap() < 1e-3);
        assert!(cross_entropy_loss(&mut g, logits, &[1, 4]).is_err());
    }

    #[test]
    fn mean_over_identical_points() {
        let mut g = Graph::new(Precision::F64);
        let one = g.constant(&crate::tensor::Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap());
        let two = g.constant(&crate::tensor::Tensor::from_rows(&[vec![0.3, -0.2], vec![-0.2, 0.3]]).unwrap());
        let a = cross_entropy_loss(&mut g, one, &[0]).unwrap();
        let b = cross_entropy_loss(&mut g, two, &[0, 1]).unwrap();
        assert!((g.scalar_value(a).unwrap() - g.scalar_value(b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn loss_trend_flags_rises() {
        let falling: Vec<_> = (1..=30).map(|e| record(e, 1.0 / e as f64)).collect();
        assert!(loss_increases(&falling).is_empty());
        let mut bumpy = falling.clone();
        bumpy[20].loss = 5.0;
        assert_eq!(loss_increases(&bumpy), vec![21]);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(0, STREAM_INIT), derive_seed(0, STREAM_ORDER));
        assert_eq!(derive_seed(5, STREAM_INIT), derive_seed(5, STREAM_INIT));
    }
}
