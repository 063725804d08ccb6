//! Neighbor search, farthest point sampling, ball grouping and
//! inverse-distance interpolation over 3-D point sets.
//!
//! Radius-bounded queries go through a uniform voxel hash whose cell edge
//! equals the search radius; inputs smaller than [`EXHAUSTIVE_BELOW`] points
//! (or unbounded searches) are scanned directly. Both paths order candidates
//! by `(squared distance, index)`, so they return identical results.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{MixWeights, Tensor};

pub type Point3 = [f64; 3];

/// Point counts below which searches skip the voxel grid.
pub const EXHAUSTIVE_BELOW: usize = 64;

/// Regularizer added to squared distances in interpolation weights.
pub const INTERP_EPS: f64 = 1e-8;

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Fixed `k` neighbors per query, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub k: usize,
    pub indices: Vec<usize>,
    pub dist2: Vec<f64>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn distances(&self, q: usize) -> &[f64] {
        &self.dist2[q * self.k..(q + 1) * self.k]
    }
}

/// Ball-query groups around sampled centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingResult {
    pub centroids: Vec<usize>,
    pub group_size: usize,
    /// `centroids.len() × group_size` member indices.
    pub members: Vec<usize>,
    /// Members found inside the radius before padding, per centroid.
    pub found: Vec<usize>,
}

impl GroupingResult {
    pub fn group(&self, c: usize) -> &[usize] {
        &self.members[c * self.group_size..(c + 1) * self.group_size]
    }
}

struct VoxelGrid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl VoxelGrid {
    fn new(points: &[Point3], radius: f64) -> Self {
        // Slight inflation keeps every in-radius pair within adjacent cells
        // despite rounding in the division.
        let cell = radius * (1.0 + 1e-9);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key_of(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key_of(p: &Point3, cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    fn for_each_near(&self, p: &Point3, mut f: impl FnMut(usize)) {
        let [x, y, z] = Self::key_of(p, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&[x + dx, y + dy, z + dz]) {
                        ids.iter().copied().for_each(&mut f);
                    }
                }
            }
        }
    }
}

/// Bounded list of the `k` smallest `(d², index)` pairs.
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn less(a: (f64, usize), b: (f64, usize)) -> bool {
        a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    fn offer(&mut self, d2: f64, idx: usize) {
        let cand = (d2, idx);
        if self.items.len() == self.k {
            if !Self::less(cand, *self.items.last().unwrap()) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&x| Self::less(x, cand));
        self.items.insert(pos, cand);
    }
}

/// The `k` nearest `points` to each query, restricted to `max_radius`.
///
/// Ties resolve to the lower index. Lists with fewer than `k` qualifying
/// points are padded by repeating the nearest qualifying one next to
/// itself; if none qualifies, the overall nearest point is used.
pub fn knn(points: &[Point3], queries: &[Point3], k: usize, max_radius: f64) -> Result<NeighborList> {
    if k == 0 {
        return Err(Error::contract("knn needs k >= 1"));
    }
    if points.is_empty() {
        return Err(Error::Degenerate("knn over an empty point set".into()));
    }
    let r2 = max_radius * max_radius;
    let grid = (max_radius.is_finite() && max_radius > 0.0 && points.len() >= EXHAUSTIVE_BELOW)
        .then(|| VoxelGrid::new(points, max_radius));

    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut dists = Vec::with_capacity(queries.len() * k);
    for q in queries {
        let mut top = TopK::new(k);
        match &grid {
            Some(grid) => grid.for_each_near(q, |i| {
                let d = dist2(&points[i], q);
                if d <= r2 {
                    top.offer(d, i);
                }
            }),
            None => {
                for (i, p) in points.iter().enumerate() {
                    let d = dist2(p, q);
                    if d <= r2 {
                        top.offer(d, i);
                    }
                }
            }
        }
        if top.items.is_empty() {
            let mut nearest = TopK::new(1);
            for (i, p) in points.iter().enumerate() {
                nearest.offer(dist2(p, q), i);
            }
            top.items = nearest.items;
        }
        // Copies of the nearest go right after it, keeping the list sorted.
        let (d0, i0) = top.items[0];
        for _ in 0..=k - top.items.len() {
            indices.push(i0);
            dists.push(d0);
        }
        for &(d, i) in &top.items[1..] {
            indices.push(i);
            dists.push(d);
        }
    }
    Ok(NeighborList {
        k,
        indices,
        dist2: dists,
    })
}

/// Greedy farthest point sampling.
///
/// Starts from index 0, or from a seeded random index when `random_start`
/// is given. Each step picks the point with the largest distance to the
/// chosen set; ties go to the lower index.
pub fn farthest_point_sample(points: &[Point3], count: usize, random_start: Option<u64>) -> Result<Vec<usize>> {
    if count > points.len() {
        return Err(Error::contract(format!(
            "cannot sample {count} of {} points",
            points.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let start = match random_start {
        Some(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..points.len()),
        None => 0,
    };
    let mut chosen = Vec::with_capacity(count);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut current = start;
    chosen.push(current);
    taken[current] = true;
    while chosen.len() < count {
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
        taken[current] = true;
        chosen.push(current);
    }
    Ok(chosen)
}

/// Up to `group_size` points within `radius` of each centroid, taken in
/// ascending index order and padded with the centroid itself.
pub fn ball_group(points: &[Point3], centroids: &[usize], radius: f64, group_size: usize) -> Result<GroupingResult> {
    if !(radius > 0.0) {
        return Err(Error::contract("ball_group radius must be positive"));
    }
    if group_size == 0 {
        return Err(Error::contract("ball_group needs group_size >= 1"));
    }
    if let Some(&bad) = centroids.iter().find(|&&c| c >= points.len()) {
        return Err(Error::contract(format!("centroid index {bad} out of range")));
    }
    let r2 = radius * radius;
    let grid = (points.len() >= EXHAUSTIVE_BELOW).then(|| VoxelGrid::new(points, radius));
    let mut members = Vec::with_capacity(centroids.len() * group_size);
    let mut found = Vec::with_capacity(centroids.len());
    let mut buf = Vec::new();
    for &c in centroids {
        let cp = points[c];
        buf.clear();
        match &grid {
            Some(grid) => {
                grid.for_each_near(&cp, |i| {
                    if dist2(&points[i], &cp) <= r2 {
                        buf.push(i);
                    }
                });
                buf.sort_unstable();
                buf.truncate(group_size);
            }
            None => {
                for (i, p) in points.iter().enumerate() {
                    if buf.len() == group_size {
                        break;
                    }
                    if dist2(p, &cp) <= r2 {
                        buf.push(i);
                    }
                }
            }
        }
        found.push(buf.len());
        members.extend_from_slice(&buf);
        members.extend(std::iter::repeat_n(c, group_size - buf.len()));
    }
    Ok(GroupingResult {
        centroids: centroids.to_vec(),
        group_size,
        members,
        found,
    })
}

/// Inverse-squared-distance weights over the 3 nearest coarse points
/// (all of them when fewer than 3 exist), normalized per fine point.
pub fn interpolation_weights(coarse_xyz: &[Point3], fine_xyz: &[Point3]) -> Result<MixWeights> {
    if coarse_xyz.is_empty() {
        return Err(Error::Degenerate("interpolation from zero coarse points".into()));
    }
    let k = coarse_xyz.len().min(3);
    let nn = knn(coarse_xyz, fine_xyz, k, f64::INFINITY)?;
    let mut offsets = Vec::with_capacity(fine_xyz.len() + 1);
    let mut entries = Vec::with_capacity(fine_xyz.len() * k);
    offsets.push(0);
    for q in 0..fine_xyz.len() {
        let raw: Vec<f64> = nn.distances(q).iter().map(|d| 1.0 / (d + INTERP_EPS)).collect();
        let total: f64 = raw.iter().sum();
        for (&idx, w) in nn.neighbors(q).iter().zip(raw) {
            entries.push((idx, w / total));
        }
        offsets.push(entries.len());
    }
    Ok(MixWeights { offsets, entries })
}

/// Plain (non-differentiable) feature interpolation, `n × c`.
pub fn interpolate_features(coarse_xyz: &[Point3], coarse_feat: &Tensor, fine_xyz: &[Point3]) -> Result<Tensor> {
    if coarse_feat.rows() != coarse_xyz.len() {
        return Err(Error::dim("interpolate_features", coarse_feat.shape(), &[coarse_xyz.len()]));
    }
    let weights = interpolation_weights(coarse_xyz, fine_xyz)?;
    let c = coarse_feat.cols();
    let mut out = vec![0.0; fine_xyz.len() * c];
    for i in 0..fine_xyz.len() {
        for &(j, w) in weights.row(i) {
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(coarse_feat.row(j)) {
                *o += w * x;
            }
        }
    }
    Tensor::matrix(fine_xyz.len(), c, out)
}
