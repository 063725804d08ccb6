use super::PointCloud;
use crate::error::{Error, Result};

// Both perturbations are written as `p + Δ` so that the identity settings
// (ratio 1, angle 0) reproduce the input bit-for-bit.

/// Scales coordinates about the centroid by `ratio`.
pub fn perturb_scale(cloud: &PointCloud, ratio: f64) -> Result<PointCloud> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::contract(format!("scale ratio must be positive, got {ratio}")));
    }
    let c = cloud.centroid();
    let k = ratio - 1.0;
    let mut out = cloud.clone();
    for p in &mut out.xyz {
        for a in 0..3 {
            p[a] += k * (p[a] - c[a]);
        }
    }
    Ok(out)
}

/// Rotates coordinates by `angle` radians about the vertical axis through
/// the centroid.
pub fn perturb_rotate_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let c = cloud.centroid();
    let (s, cs) = angle.sin_cos();
    let cm1 = cs - 1.0;
    let mut out = cloud.clone();
    for p in &mut out.xyz {
        let dx = p[0] - c[0];
        let dy = p[1] - c[1];
        p[0] += cm1 * dx - s * dy;
        p[1] += s * dx + cm1 * dy;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::dist2;
    use std::f64::consts::PI;

    fn sample() -> PointCloud {
        PointCloud::new(vec![[0.3, 1.7, 0.2], [2.1, -0.4, 1.1], [0.9, 0.8, -0.5], [1.5, 1.25, 0.0]])
            .with_labels(vec![0, 1, 2, 1])
    }

    #[test]
    fn identities_are_exact() {
        let c = sample();
        assert_eq!(perturb_scale(&c, 1.0).unwrap(), c);
        assert_eq!(perturb_rotate_z(&c, 0.0), c);
    }

    #[test]
    fn full_turn_is_periodic() {
        let c = sample();
        let r = perturb_rotate_z(&c, 2.0 * PI);
        for (a, b) in c.xyz.iter().zip(&r.xyz) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
        assert_eq!(r.labels, c.labels);
    }

    #[test]
    fn quarter_turn() {
        let c = PointCloud::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let r = perturb_rotate_z(&c, PI / 2.0);
        assert!((r.xyz[0][0]).abs() < 1e-12);
        assert!((r.xyz[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(r.xyz[0][2], 0.0);
    }

    #[test]
    fn distances_preserved_by_rotation_and_scaled_by_ratio() {
        let c = sample();
        let r = perturb_rotate_z(&c, 0.7);
        let s = perturb_scale(&c, 0.5).unwrap();
        for i in 0..c.len() {
            for j in 0..c.len() {
                let d = dist2(&c.xyz[i], &c.xyz[j]).sqrt();
                assert!((dist2(&r.xyz[i], &r.xyz[j]).sqrt() - d).abs() < 1e-9);
                assert!((dist2(&s.xyz[i], &s.xyz[j]).sqrt() - 0.5 * d).abs() < 1e-9);
            }
        }
        assert!(perturb_scale(&c, 0.0).is_err());
    }
}
