//! Point clouds: file formats, block partitioning, synthetic scenes and
//! robustness perturbations.

mod format;
mod partition;
mod perturb;
mod synth;

pub use format::{load_cloud, save_cloud, CloudFormat, Column};
pub use partition::{cover_blocks, partition_blocks, Block, PartitionMode};
pub use perturb::{perturb_rotate_z, perturb_scale};
pub use synth::{generate_synthetic_scene, PrimitiveShape, PrimitiveSpec, SceneSpec};

use crate::error::{Error, Result};
use crate::spatial::Point3;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<Point3>,
    /// Extra per-point attributes (row-major, `attr_names.len()` wide).
    pub attrs: Vec<f64>,
    pub attr_names: Vec<String>,
    pub labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(xyz: Vec<Point3>) -> Self {
        Self {
            xyz,
            attrs: Vec::new(),
            attr_names: Vec::new(),
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn attr_width(&self) -> usize {
        self.attr_names.len()
    }

    /// Feature width `C_f`: coordinates plus attributes.
    pub fn feature_width(&self) -> usize {
        3 + self.attr_width()
    }

    pub fn attrs_of(&self, i: usize) -> &[f64] {
        let w = self.attr_width();
        &self.attrs[i * w..(i + 1) * w]
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.xyz {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if let Some(i) = self.xyz.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite(format!("coordinate of point {i}")));
        }
        if self.attrs.len() != self.len() * self.attr_width() {
            return Err(Error::Format(format!(
                "attribute buffer holds {} values for {} points of width {}",
                self.attrs.len(),
                self.len(),
                self.attr_width()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::Format(format!(
                    "{} labels for {} points",
                    labels.len(),
                    self.len()
                )));
            }
            if let Some(c) = num_classes {
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
                }
            }
        }
        Ok(())
    }

    /// Highest label plus one, if labeled.
    pub fn class_count(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }
}
