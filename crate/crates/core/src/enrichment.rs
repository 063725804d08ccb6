//! Contextual point representation and its gated fusion with the point's
//! own features.
//!
//! Each point's `k` nearest neighbors (nearest first) are concatenated into
//! a `k·C_f` context vector `R`. The point itself is lifted to the same
//! width by a linear layer, and the two vectors gate each other through
//! sigmoids before being concatenated into a `2·k·C_f` feature.
//! Gate weights are shared by all points.

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamDecl};
use crate::spatial::NeighborList;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct EnrichmentParams {
    /// Lifts `C_f` point features to `k·C_f`.
    pub lift: Linear,
    /// Gate on the lifted point, driven by the context.
    pub gate_r: Linear,
    /// Gate on the context, driven by the lifted point.
    pub gate_p: Linear,
}

impl EnrichmentParams {
    pub fn decl(prefix: &str, c_f: usize, k: usize) -> Vec<ParamDecl> {
        let w = k * c_f;
        let mut out = Linear::decl(&format!("{prefix}.lift"), c_f, w);
        out.extend(Linear::decl(&format!("{prefix}.gate_r"), w, w));
        out.extend(Linear::decl(&format!("{prefix}.gate_p"), w, w));
        out
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            lift: Linear::bind(bound, &format!("{prefix}.lift"))?,
            gate_r: Linear::bind(bound, &format!("{prefix}.gate_r"))?,
            gate_p: Linear::bind(bound, &format!("{prefix}.gate_p"))?,
        })
    }
}

/// Row `i` is the concatenation of the features of point `i`'s neighbors.
pub fn contextual_representation(g: &mut Graph, feats: Var, neighbors: &NeighborList) -> Result<Var> {
    let shape = g.shape(feats).to_vec();
    let (n, c) = match shape[..] {
        [n, c] => (n, c),
        _ => return Err(Error::dim("contextual_representation", &shape, &[0, 0])),
    };
    if neighbors.len() != n {
        return Err(Error::dim("contextual_representation", &shape, &[neighbors.len(), neighbors.k]));
    }
    let gathered = g.gather_rows(feats, &neighbors.indices)?;
    g.reshape(gathered, vec![n, neighbors.k * c])
}

/// Mutual gating of two equal-width features:
/// `σ(ctx_gate(b)) ⊙ a ∥ σ(self_gate(a)) ⊙ b`.
pub fn gated_pair(g: &mut Graph, a: Var, b: Var, gate_from_b: &Linear, gate_from_a: &Linear) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim("gated_pair", g.shape(a), g.shape(b)));
    }
    let zb = gate_from_b.forward(g, b)?;
    let gate_a = g.sigmoid(zb);
    let a_hat = g.mul(gate_a, a)?;
    let za = gate_from_a.forward(g, a)?;
    let gate_b = g.sigmoid(za);
    let b_hat = g.mul(gate_b, b)?;
    g.concat_cols(&[a_hat, b_hat])
}

/// Gated fusion of point features `p: n×C_f` with context `r: n×k·C_f`.
pub fn gated_fuse(g: &mut Graph, p: Var, r: Var, params: &EnrichmentParams) -> Result<Var> {
    let lifted = params.lift.forward(g, p)?;
    gated_pair(g, lifted, r, &params.gate_r, &params.gate_p)
}

/// Ablation variant: plain `p ∥ r`.
pub fn concat_fuse(g: &mut Graph, p: Var, r: Var) -> Result<Var> {
    g.concat_cols(&[p, r])
}
