use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::spatial::Point3;

/// Labeled primitives making up a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<PrimitiveSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    #[serde(flatten)]
    pub shape: PrimitiveShape,
    pub class: usize,
    pub count: usize,
    /// Standard deviation of the isotropic Gaussian jitter, truncated at
    /// three deviations.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum PrimitiveShape {
    HorizontalPlane { z: f64, x: [f64; 2], y: [f64; 2] },
    VerticalPlane { start: [f64; 2], end: [f64; 2], z: [f64; 2] },
    Box { min: Point3, max: Point3 },
    SphereCluster { centers: Vec<Point3>, radius: f64 },
}

impl SceneSpec {
    /// Two horizontal 2 m × 2 m planes at z = 0 (class 0) and z = 1 (class 1).
    pub fn two_planes(points_per_plane: usize, jitter: f64) -> Self {
        let plane = |z, class| PrimitiveSpec {
            shape: PrimitiveShape::HorizontalPlane {
                z,
                x: [0.0, 2.0],
                y: [0.0, 2.0],
            },
            class,
            count: points_per_plane,
            jitter,
        };
        Self {
            primitives: vec![plane(0.0, 0), plane(1.0, 1)],
        }
    }

    /// Floor, wall, a floating box and a cluster of spheres over 2 m × 2 m,
    /// classes 0..4, 2048 points in total.
    pub fn four_class(jitter: f64) -> Self {
        Self {
            primitives: vec![
                PrimitiveSpec {
                    shape: PrimitiveShape::HorizontalPlane {
                        z: 0.0,
                        x: [0.0, 2.0],
                        y: [0.0, 2.0],
                    },
                    class: 0,
                    count: 700,
                    jitter,
                },
                PrimitiveSpec {
                    shape: PrimitiveShape::VerticalPlane {
                        start: [0.0, 1.98],
                        end: [2.0, 1.98],
                        z: [0.0, 1.5],
                    },
                    class: 1,
                    count: 500,
                    jitter,
                },
                PrimitiveSpec {
                    shape: PrimitiveShape::Box {
                        min: [0.4, 0.4, 0.15],
                        max: [1.0, 1.0, 0.65],
                    },
                    class: 2,
                    count: 500,
                    jitter,
                },
                PrimitiveSpec {
                    shape: PrimitiveShape::SphereCluster {
                        centers: vec![[1.5, 0.5, 0.4], [1.5, 1.3, 0.6], [0.5, 1.5, 0.35]],
                        radius: 0.18,
                    },
                    class: 3,
                    count: 348,
                    jitter,
                },
            ],
        }
    }

    pub fn total_points(&self) -> usize {
        self.primitives.iter().map(|p| p.count).sum()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn sample_surface(shape: &PrimitiveShape, rng: &mut ChaCha8Rng) -> Point3 {
    match shape {
        PrimitiveShape::HorizontalPlane { z, x, y } => [uniform(rng, x[0], x[1]), uniform(rng, y[0], y[1]), *z],
        PrimitiveShape::VerticalPlane { start, end, z } => {
            let t: f64 = rng.random();
            [
                start[0] + t * (end[0] - start[0]),
                start[1] + t * (end[1] - start[1]),
                uniform(rng, z[0], z[1]),
            ]
        }
        PrimitiveShape::Box { min, max } => {
            let ext = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
            // Face pairs normal to x, y and z, weighted by area.
            let areas = [ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random::<f64>() * total;
            let mut axis = 2;
            for (a, &area) in areas.iter().enumerate() {
                if pick < area {
                    axis = a;
                    break;
                }
                pick -= area;
            }
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = uniform(rng, min[a], max[a]);
            }
            p[axis] = if rng.random::<bool>() { max[axis] } else { min[axis] };
            p
        }
        PrimitiveShape::SphereCluster { centers, radius } => {
            let c = centers[rng.random_range(0..centers.len())];
            // Uniform direction via the z / azimuth parametrization.
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            [c[0] + radius * r * phi.cos(), c[1] + radius * r * phi.sin(), c[2] + radius * z]
        }
    }
}

fn validate(spec: &PrimitiveSpec) -> Result<()> {
    if !(spec.jitter >= 0.0) {
        return Err(Error::contract("jitter must be non-negative"));
    }
    if let PrimitiveShape::SphereCluster { centers, radius } = &spec.shape {
        if centers.is_empty() || !(*radius > 0.0) {
            return Err(Error::Degenerate("sphere cluster needs centers and a positive radius".into()));
        }
    }
    Ok(())
}

/// Samples every primitive's budget uniformly over its surface.
///
/// Coordinates are rounded to single precision, matching what the binary
/// format stores.
pub fn generate_synthetic_scene(spec: &SceneSpec, seed: u64) -> Result<PointCloud> {
    if spec.total_points() == 0 {
        return Err(Error::Degenerate("scene has zero total point budget".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xyz = Vec::with_capacity(spec.total_points());
    let mut labels = Vec::with_capacity(spec.total_points());
    for prim in &spec.primitives {
        validate(prim)?;
        let noise = (prim.jitter > 0.0).then(|| Normal::new(0.0, prim.jitter).expect("valid deviation"));
        for _ in 0..prim.count {
            let mut p = sample_surface(&prim.shape, &mut rng);
            if let Some(noise) = &noise {
                for v in &mut p {
                    let d = loop {
                        let d: f64 = noise.sample(&mut rng);
                        if d.abs() <= 3.0 * prim.jitter {
                            break d;
                        }
                    };
                    *v += d;
                }
            }
            xyz.push(p.map(|v| v as f32 as f64));
            labels.push(prim.class);
        }
    }
    Ok(PointCloud::new(xyz).with_labels(labels))
}
