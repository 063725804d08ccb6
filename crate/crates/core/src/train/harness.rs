use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, evaluate_dataset, predict_cloud, train, DataConfig, MetricsReport, TrainConfig};
use crate::backbone::{BlockInput, ModelParams, NetworkConfig, Variant};
use crate::cloud::{perturb_rotate_z, perturb_scale, PointCloud};
use crate::error::{Error, Result};
use crate::tensor::Precision;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub final_loss: f64,
    pub order_hash: u64,
    pub report: MetricsReport,
}

/// Trains and evaluates each variant on the same blocks with the same
/// seeds. The `ablation` field of `net` is replaced per variant.
pub fn run_ablation(
    dataset: &[BlockInput],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::contract("ablation suite has no variants"));
    }
    variants
        .iter()
        .map(|&variant| {
            let net = net.with_ablation(variant.ablation());
            let outcome = train(dataset, &net, cfg)?;
            let report = evaluate_dataset(&outcome.params, &net, dataset, cfg.precision)?;
            Ok(AblationRow {
                variant,
                label: variant.label().to_string(),
                final_loss: outcome.final_loss(),
                order_hash: outcome.order_hash,
                report,
            })
        })
        .collect()
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>8} {:>8} {:>10}", "variant", "OA", "mIoU", "loss");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<24} {:>8.4} {:>8.4} {:>10.5}",
            r.label, r.report.oa, r.report.miou, r.final_loss
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Perturbation {
    /// Scale about the centroid.
    Scale(f64),
    /// Rotation in radians about the vertical axis through the centroid.
    RotateZ(f64),
}

impl Perturbation {
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        match *self {
            Perturbation::Scale(r) => perturb_scale(cloud, r),
            Perturbation::RotateZ(a) => Ok(perturb_rotate_z(cloud, a)),
        }
    }

    /// Scale ratios {1.0, 0.5}, rotations {0, π/10} and a full turn.
    pub fn standard_suite() -> Vec<Perturbation> {
        use std::f64::consts::PI;
        vec![
            Perturbation::Scale(1.0),
            Perturbation::Scale(0.5),
            Perturbation::RotateZ(0.0),
            Perturbation::RotateZ(PI / 10.0),
            Perturbation::RotateZ(2.0 * PI),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessEntry {
    pub perturbation: Perturbation,
    pub oa: f64,
    pub miou: f64,
    /// `oa − baseline_oa`.
    pub delta_oa: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub baseline_oa: f64,
    pub baseline_miou: f64,
    pub entries: Vec<RobustnessEntry>,
}

/// Evaluates a trained model on perturbed copies of a labeled cloud.
pub fn run_robustness(
    params: &ModelParams,
    net: &NetworkConfig,
    data: &DataConfig,
    cloud: &PointCloud,
    perturbations: &[Perturbation],
    seed: u64,
    precision: Precision,
) -> Result<RobustnessReport> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("robustness evaluation needs a labeled cloud"))?;
    let score = |c: &PointCloud| -> Result<MetricsReport> {
        let pred = predict_cloud(params, net, data, c, seed, precision)?;
        evaluate(&pred, labels, net.num_classes)
    };
    let base = score(cloud)?;
    let entries = perturbations
        .iter()
        .map(|p| {
            let r = score(&p.apply(cloud)?)?;
            Ok(RobustnessEntry {
                perturbation: *p,
                oa: r.oa,
                miou: r.miou,
                delta_oa: r.oa - base.oa,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RobustnessReport {
        baseline_oa: base.oa,
        baseline_miou: base.miou,
        entries,
    })
}
