//! Straight-line reference implementations used as test oracles. Nothing
//! here calls into the library.

pub type Rows = Vec<Vec<f64>>;

pub fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Full sort of every point by `(distance, index)`, then the radius filter
/// and padding rule applied literally.
pub fn knn(points: &[[f64; 3]], queries: &[[f64; 3]], k: usize, radius: f64) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::new();
    let mut dist = Vec::new();
    for q in queries {
        let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (d2(p, q), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut inside: Vec<(f64, usize)> = all.iter().copied().filter(|&(d, _)| d <= radius * radius).take(k).collect();
        if inside.is_empty() {
            inside.push(all[0]);
        }
        while inside.len() < k {
            inside.insert(0, inside[0]);
        }
        for (d, i) in inside {
            idx.push(i);
            dist.push(d);
        }
    }
    (idx, dist)
}

/// Greedy farthest point sampling from index 0, recomputing every
/// point-to-set distance from scratch at each step.
pub fn fps(points: &[[f64; 3]], count: usize) -> Vec<usize> {
    let mut chosen = vec![0];
    while chosen.len() < count {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| d2(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen.truncate(count);
    chosen
}

pub fn min_pairwise(points: &[[f64; 3]], subset: &[usize]) -> f64 {
    let mut m = f64::INFINITY;
    for a in 0..subset.len() {
        for b in a + 1..subset.len() {
            m = m.min(d2(&points[subset[a]], &points[subset[b]]));
        }
    }
    m
}

pub fn ball_group(points: &[[f64; 3]], centroids: &[usize], radius: f64, g: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &c in centroids {
        let mut members: Vec<usize> = (0..points.len())
            .filter(|&i| d2(&points[i], &points[c]) <= radius * radius)
            .take(g)
            .collect();
        members.resize(g, c);
        out.extend(members);
    }
    out
}

pub struct Metrics {
    pub confusion: Vec<Vec<u64>>,
    pub oa: f64,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn metrics(pred: &[usize], truth: &[usize], classes: usize) -> Metrics {
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let total = pred.len() as f64;
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let mut iou = Vec::new();
    for c in 0..classes {
        let tp = confusion[c][c];
        let row: u64 = confusion[c].iter().sum();
        let col: u64 = (0..classes).map(|t| confusion[t][c]).sum();
        let union = row + col - tp;
        iou.push((union > 0).then(|| tp as f64 / union as f64));
    }
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    Metrics {
        confusion,
        oa: correct as f64 / total,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        iou,
    }
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

/// Dense layer `x·w + b` with `w: c_in × c_out`.
#[derive(Clone, Debug)]
pub struct Lin {
    pub w: Rows,
    pub b: Vec<f64>,
}

impl Lin {
    pub fn apply(&self, x: &Rows) -> Rows {
        let mut out = matmul(x, &self.w);
        for row in &mut out {
            for (o, b) in row.iter_mut().zip(&self.b) {
                *o += b;
            }
        }
        out
    }

    pub fn identity(c: usize) -> Self {
        Lin {
            w: (0..c).map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
            b: vec![0.0; c],
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `σ(gate_from_b(b)) ⊙ a ∥ σ(gate_from_a(a)) ⊙ b`, row by row.
pub fn gated_pair(a: &Rows, b: &Rows, gate_from_b: &Lin, gate_from_a: &Lin) -> Rows {
    let zb = gate_from_b.apply(b);
    let za = gate_from_a.apply(a);
    (0..a.len())
        .map(|i| {
            let mut row: Vec<f64> = (0..a[i].len()).map(|c| sigmoid(zb[i][c]) * a[i][c]).collect();
            row.extend((0..b[i].len()).map(|c| sigmoid(za[i][c]) * b[i][c]));
            row
        })
        .collect()
}

/// Contextual representation: neighbor features laid side by side.
pub fn context(feats: &Rows, neighbors: &[usize], k: usize) -> Rows {
    neighbors.chunks(k).map(|nb| nb.iter().flat_map(|&j| feats[j].clone()).collect()).collect()
}

/// Graph attention within each group: `β_ij = softmax_j(leaky(ĝ_i·ĝ_j))`,
/// output row `i` is `Σ_j β_ij ĝ_j` with `ĝ = proj(x)`.
pub fn gab(x: &Rows, groups: usize, proj: &Lin, slope: f64) -> (Rows, Vec<Vec<f64>>) {
    let h = proj.apply(x);
    let n = x.len() / groups;
    let mut out = Vec::new();
    let mut betas = Vec::new();
    for g in 0..groups {
        let members = &h[g * n..(g + 1) * n];
        for i in 0..n {
            let z: Vec<f64> = (0..n)
                .map(|j| {
                    let s = dot(&members[i], &members[j]);
                    if s >= 0.0 { s } else { slope * s }
                })
                .collect();
            let beta = softmax(&z);
            let mut row = vec![0.0; members[0].len()];
            for j in 0..n {
                for c in 0..row.len() {
                    row[c] += beta[j] * members[j][c];
                }
            }
            out.push(row);
            betas.push(beta);
        }
    }
    (out, betas)
}

/// `F̂_i = Σ_j softmax_j(A_i·B_j) D_j + F_i`.
pub fn spatial_attention(f: &Rows, fa: &Lin, fb: &Lin, fd: &Lin) -> (Rows, Vec<Vec<f64>>) {
    let (a, b, d) = (fa.apply(f), fb.apply(f), fd.apply(f));
    let n = f.len();
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        let v = softmax(&(0..n).map(|j| dot(&a[i], &b[j])).collect::<Vec<_>>());
        let mut row = f[i].clone();
        for j in 0..n {
            for c in 0..row.len() {
                row[c] += v[j] * d[j][c];
            }
        }
        out.push(row);
        weights.push(v);
    }
    (out, weights)
}

/// `E = FᵀF`, `m_pq = exp(E_pq) / Σ_p' exp(E_p'q)`, `F̃ = F·M + F`.
/// Returns the output and `M`.
pub fn channel_attention(f: &Rows) -> (Rows, Rows) {
    let c = f[0].len();
    let mut e = vec![vec![0.0; c]; c];
    for p in 0..c {
        for q in 0..c {
            e[p][q] = f.iter().map(|row| row[p] * row[q]).sum();
        }
    }
    let mut m = vec![vec![0.0; c]; c];
    for q in 0..c {
        let col = softmax(&(0..c).map(|p| e[p][q]).collect::<Vec<_>>());
        for p in 0..c {
            m[p][q] = col[p];
        }
    }
    let mut out = matmul(f, &m);
    for (o, fr) in out.iter_mut().zip(f) {
        for (x, y) in o.iter_mut().zip(fr) {
            *x += y;
        }
    }
    (out, m)
}

pub fn max_abs_diff(a: &Rows, b: &[f64]) -> f64 {
    a.iter().flatten().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
