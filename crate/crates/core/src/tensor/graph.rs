use super::kernels::{self, canonical_order, dot};
use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row combination: output row `i` is
/// `Σ weight · input[src]` over `entries[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeights {
    pub offsets: Vec<usize>,
    pub entries: Vec<(usize, f64)>,
}

impl MixWeights {
    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Fc(Var, Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    MaxOverRows { input: Var, argmax: Vec<usize> },
    GatherRows(Var, Vec<usize>),
    MixRows(Var, MixWeights),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        slope: Option<f64>,
        probs: Vec<f64>,
        scores: Vec<f64>,
    },
    Gram(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Fc(..) => "fc",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaxOverRows { .. } => "max_over_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::MixRows(..) => "mix_rows",
            Op::Reshape(_) => "reshape",
            Op::Attention { .. } => "attention",
            Op::Gram(_) => "gram",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
    label: Option<String>,
}

/// First node holding a NaN or infinity, in append order.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFiniteReport {
    pub node: usize,
    pub op: &'static str,
    pub label: Option<String>,
    pub shape: Vec<usize>,
}

impl std::fmt::Display for NonFiniteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node {} ({}", self.node, self.op)?;
        if let Some(l) = &self.label {
            write!(f, " '{l}'")?;
        }
        write!(f, ", shape {:?})", self.shape)
    }
}

/// Append-only tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn rank2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.precision.round_slice(&mut data);
        let needs_grad = match &op {
            Op::Leaf => false,
            op => self.inputs(op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Fc(x, w, b) => vec![*x, *w, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::SoftmaxRows(a)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GatherRows(a, _)
            | Op::MixRows(a, _)
            | Op::Reshape(a)
            | Op::Gram(a) => vec![*a],
            Op::MaxOverRows { input, .. } => vec![*input],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn leaf(&mut self, t: &Tensor, needs_grad: bool, label: Option<String>) -> Var {
        let mut data = t.data().to_vec();
        self.precision.round_slice(&mut data);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data,
            op: Op::Leaf,
            needs_grad,
            label,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that honours the tensor's `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t, t.requires_grad(), None)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false, None)
    }

    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        self.leaf(t, true, Some(name.to_string()))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Option<f64> {
        let n = &self.nodes[v.0];
        (n.data.len() == 1).then(|| n.data[0])
    }

    /// Normalized attention weights recorded by an [`Graph::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn first_non_finite(&self) -> Option<NonFiniteReport> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.data.iter().all(|x| x.is_finite())).then(|| NonFiniteReport {
                node: i,
                op: n.op.name(),
                label: n.label.clone(),
                shape: n.shape.clone(),
            })
        })
    }

    /// Hash of every piecewise branch taken by the recorded forward pass:
    /// ReLU and LeakyReLU input signs, max-pool winners and attention score
    /// signs. Two evaluations with equal signatures lie on the same smooth
    /// piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    i.hash(&mut h);
                    for &x in self.value(*a) {
                        (x > 0.0).hash(&mut h);
                    }
                }
                Op::MaxOverRows { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Attention { scores, .. } => {
                    i.hash(&mut h);
                    for &s in scores {
                        (s > 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        rank2(self.shape(v)).ok_or_else(|| Error::dim(op, self.shape(v), &[0, 0]))
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `x·w + b` with the bias broadcast over rows.
    pub fn fc(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("fc", x)?;
        let (k2, n) = self.dims2("fc", w)?;
        if k != k2 {
            return Err(Error::dim("fc", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [n] {
            return Err(Error::dim("fc bias", self.shape(w), self.shape(b)));
        }
        let mut out = kernels::matmul(self.value(x), self.value(w), m, k, n);
        let bias = self.value(b);
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(vec![m, n], out, Op::Fc(x, w, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let out = kernels::transpose(self.value(a), r, c);
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).iter().map(|&x| leaky(x, slope)).collect();
        self.push(self.shape(a).to_vec(), out, Op::LeakyRelu(a, slope))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(shape, out, Op::SoftmaxRows(a)))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::Degenerate("concat of zero tensors".into()))?;
        let (rows, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(vars.len());
        for &v in vars {
            let (r, c) = self.dims2("concat_cols", v)?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(v)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in vars.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(vars.to_vec())))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", a)?;
        if start >= end || end > cols {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, end]));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        Ok(self.push(vec![rows, end - start], out, Op::SliceCols(a, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Degenerate("mean over empty tensor".into()));
        }
        let s: f64 = self.value(a).iter().sum();
        Ok(self.push(vec![1], vec![s / n as f64], Op::Mean(a)))
    }

    /// Channel-wise max over consecutive runs of `group` rows:
    /// `[b·group, c] → [b, c]`. Ties resolve to the lowest row.
    pub fn max_over_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.dims2("max_over_rows", a)?;
        if group == 0 || rows % group != 0 {
            return Err(Error::Degenerate(format!(
                "max_over_rows: {rows} rows not divisible into groups of {group}"
            )));
        }
        let b = rows / group;
        let src = self.value(a);
        let mut out = vec![0.0; b * c];
        let mut argmax = vec![0usize; b * c];
        for g in 0..b {
            for ch in 0..c {
                let mut best = g * group;
                let mut bv = src[best * c + ch];
                for r in g * group + 1..(g + 1) * group {
                    let v = src[r * c + ch];
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                out[g * c + ch] = bv;
                argmax[g * c + ch] = best;
            }
        }
        Ok(self.push(vec![b, c], out, Op::MaxOverRows { input: a, argmax }))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2("gather_rows", a)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("gather_rows index {bad} out of {rows} rows")));
        }
        if indices.is_empty() {
            return Err(Error::Degenerate("gather of zero rows".into()));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![indices.len(), c], out, Op::GatherRows(a, indices.to_vec())))
    }

    pub fn mix_rows(&mut self, a: Var, weights: &MixWeights) -> Result<Var> {
        let (rows, c) = self.dims2("mix_rows", a)?;
        if weights.entries.iter().any(|&(i, _)| i >= rows) {
            return Err(Error::contract("mix_rows source index out of range"));
        }
        let n = weights.rows();
        if n == 0 {
            return Err(Error::Degenerate("mix of zero rows".into()));
        }
        let src = self.value(a);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let dst = &mut out[i * c..(i + 1) * c];
            for &(j, w) in weights.row(i) {
                for (o, &x) in dst.iter_mut().zip(&src[j * c..(j + 1) * c]) {
                    *o += w * x;
                }
            }
        }
        Ok(self.push(vec![n, c], out, Op::MixRows(a, weights.clone())))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(a), &shape));
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape, data, Op::Reshape(a)))
    }

    /// Grouped dot-product attention.
    ///
    /// `q`, `k` and `v` hold `groups` consecutive blocks of equal row count.
    /// Within each block, scores `q_i · k_j` (optionally passed through a
    /// LeakyReLU) are softmax-normalized over `j`, and row `i` of the output
    /// is `Σ_j p_ij v_j`. Reductions over `j` run in the canonical order of
    /// the `(k_j, v_j)` rows, which makes the output exactly equivariant to
    /// row permutations within a group.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        slope: Option<f64>,
    ) -> Result<Var> {
        let (rq, cq) = self.dims2("attention", q)?;
        let (rk, ck) = self.dims2("attention", k)?;
        let (rv, cv) = self.dims2("attention", v)?;
        if cq != ck || rk != rv {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if groups == 0 || rq % groups != 0 || rk % groups != 0 {
            return Err(Error::Degenerate(format!(
                "attention: rows {rq}/{rk} not divisible into {groups} groups"
            )));
        }
        let (m, n) = (rq / groups, rk / groups);
        let (qd, kd, vd) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; groups * m * n];
        let mut scores = if slope.is_some() { vec![0.0; groups * m * n] } else { Vec::new() };
        let mut out = vec![0.0; rq * cv];
        let mut z = vec![0.0; n];
        for g in 0..groups {
            let kg = &kd[g * n * ck..(g + 1) * n * ck];
            let vg = &vd[g * n * cv..(g + 1) * n * cv];
            let order = canonical_order(&[kg, vg], 0..n, &[ck, cv]);
            for i in 0..m {
                let qi = &qd[(g * m + i) * cq..(g * m + i + 1) * cq];
                let base = (g * m + i) * n;
                for j in 0..n {
                    let s = dot(qi, &kg[j * ck..(j + 1) * ck]);
                    if let Some(sl) = slope {
                        scores[base + j] = s;
                        z[j] = leaky(s, sl);
                    } else {
                        z[j] = s;
                    }
                }
                let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for zj in z.iter_mut() {
                    *zj = (*zj - mx).exp();
                }
                let total: f64 = order.iter().map(|&j| z[j]).sum();
                let p = &mut probs[base..base + n];
                for j in 0..n {
                    p[j] = z[j] / total;
                }
                let o = &mut out[(g * m + i) * cv..(g * m + i + 1) * cv];
                for &j in &order {
                    let pj = p[j];
                    for (oc, &x) in o.iter_mut().zip(&vg[j * cv..(j + 1) * cv]) {
                        *oc += pj * x;
                    }
                }
            }
        }
        Ok(self.push(
            vec![rq, cv],
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                slope,
                probs,
                scores,
            },
        ))
    }

    /// `aᵀ·a` for `a: [n×c]`, summing over rows in canonical row order so
    /// the result is exactly invariant to row permutations.
    pub fn gram(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.dims2("gram", a)?;
        let src = self.value(a);
        let order = canonical_order(&[src], 0..n, &[c]);
        let mut out = vec![0.0; c * c];
        for &r in &order {
            let row = &src[r * c..(r + 1) * c];
            for p in 0..c {
                let rp = row[p];
                let dst = &mut out[p * c..(p + 1) * c];
                for (o, &x) in dst.iter_mut().zip(row) {
                    *o += rp * x;
                }
            }
        }
        Ok(self.push(vec![c, c], out, Op::Gram(a)))
    }

    /// Mean softmax cross-entropy of `logits: [n×classes]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[l];
            softmax_in_place(row);
        }
        Ok(self.push(
            vec![1],
            vec![total / n as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty graph"));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        f(buf);
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rank2(self.shape(*a)).unwrap();
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let ga = kernels::matmul_nt(g, self.value(*b), m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = kernels::matmul_tn(self.value(*a), g, m, k, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Fc(x, w, b) => {
                let (m, k) = rank2(self.shape(*x)).unwrap();
                let n = self.shape(*w)[1];
                if self.needs(*x) {
                    let gx = kernels::matmul_nt(g, self.value(*w), m, n, k);
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let gw = kernels::matmul_tn(self.value(*x), g, m, k, n);
                    self.accumulate(grads, *w, gw);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, &x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = rank2(self.shape(*a)).unwrap();
                self.accumulate(grads, *a, kernels::transpose(g, c, r));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * c).collect());
            }
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(out).map(|(d, y)| d * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(d, &x)| if x > 0.0 { *d } else { d * slope })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let c = *node.shape.last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                    let s = dot(gr, yr);
                    for ((o, &d), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = y * (d - s);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(vars) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &v in vars {
                    let w = self.shape(v)[1];
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gv.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = rank2(self.shape(*a)).unwrap();
                let w = node.shape[1];
                let start = *start;
                self.accumulate_with(grads, *a, |buf| {
                    for r in 0..rows {
                        for c in 0..w {
                            buf[r * cols + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::MaxOverRows { input, argmax } => {
                let c = node.shape[1];
                self.accumulate_with(grads, *input, |buf| {
                    for (idx, (&src, &d)) in argmax.iter().zip(g).enumerate() {
                        buf[src * c + idx % c] += d;
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let c = node.shape[1];
                self.accumulate_with(grads, *a, |buf| {
                    for (r, &src) in indices.iter().enumerate() {
                        for (o, &d) in buf[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *o += d;
                        }
                    }
                });
            }
            Op::MixRows(a, weights) => {
                let c = node.shape[1];
                self.accumulate_with(grads, *a, |buf| {
                    for r in 0..weights.rows() {
                        let gr = &g[r * c..(r + 1) * c];
                        for &(src, w) in weights.row(r) {
                            for (o, &d) in buf[src * c..(src + 1) * c].iter_mut().zip(gr) {
                                *o += w * d;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.to_vec());
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                slope,
                probs,
                scores,
            } => self.attention_backward(g, grads, (*q, *k, *v), *groups, *slope, probs, scores),
            Op::Gram(a) => {
                let (n, c) = rank2(self.shape(*a)).unwrap();
                // dA = A (G + Gᵀ)
                let mut sym = vec![0.0; c * c];
                for p in 0..c {
                    for q in 0..c {
                        sym[p * c + q] = g[p * c + q] + g[q * c + p];
                    }
                }
                let ga = kernels::matmul(self.value(*a), &sym, n, c, c);
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= scale;
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        groups: usize,
        slope: Option<f64>,
        probs: &[f64],
        scores: &[f64],
    ) {
        let (rq, c) = rank2(self.shape(q)).unwrap();
        let (rk, cv) = rank2(self.shape(v)).unwrap();
        let (m, n) = (rq / groups, rk / groups);
        let (qd, kd, vd) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; rq * c];
        let mut gk = vec![0.0; rk * c];
        let mut gv = vec![0.0; rk * cv];
        for grp in 0..groups {
            let pg = &probs[grp * m * n..(grp + 1) * m * n];
            let dout = &g[grp * m * cv..(grp + 1) * m * cv];
            let vg = &vd[grp * n * cv..(grp + 1) * n * cv];
            let kg = &kd[grp * n * c..(grp + 1) * n * c];
            let qg = &qd[grp * m * c..(grp + 1) * m * c];

            let dv = kernels::matmul_tn(pg, dout, m, n, cv);
            for (o, x) in gv[grp * n * cv..(grp + 1) * n * cv].iter_mut().zip(dv) {
                *o += x;
            }
            let mut ds = kernels::matmul_nt(dout, vg, m, cv, n);
            for i in 0..m {
                let row = &mut ds[i * n..(i + 1) * n];
                let pr = &pg[i * n..(i + 1) * n];
                let s = dot(row, pr);
                for (d, &p) in row.iter_mut().zip(pr) {
                    *d = p * (*d - s);
                }
                if let Some(sl) = slope {
                    let sr = &scores[(grp * m + i) * n..(grp * m + i + 1) * n];
                    for (d, &raw) in row.iter_mut().zip(sr) {
                        if raw <= 0.0 {
                            *d *= sl;
                        }
                    }
                }
            }
            let dq = kernels::matmul(&ds, kg, m, n, c);
            for (o, x) in gq[grp * m * c..(grp + 1) * m * c].iter_mut().zip(dq) {
                *o += x;
            }
            let dk = kernels::matmul_tn(&ds, qg, m, n, c);
            for (o, x) in gk[grp * n * c..(grp + 1) * n * c].iter_mut().zip(dk) {
                *o += x;
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x * slope
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
