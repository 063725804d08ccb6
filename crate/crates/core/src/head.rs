//! Global-context prediction head.
//!
//! Spatial attention relates every point to every other point of the block
//! through projected maps `A`, `B`, `D`: `v_ij = softmax_j(A_i·B_j)` and
//! `F̂_i = Σ_j v_ij D_j + F_i`. Channel attention has no learned
//! projections: with channel energies `E = FᵀF`, `m_pq = softmax_p(E_pq)`
//! normalizes over source channels for each output channel `q`, and
//! `F̃ = F·M + F`. The two branches are summed before the classifier.

use crate::error::Result;
use crate::nn::{Bound, Linear, ParamDecl};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub fc_a: Linear,
    pub fc_b: Linear,
    pub fc_d: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    /// `None` when the attention branches are disabled.
    pub attention: Option<AttentionParams>,
    pub classifier: Linear,
}

impl HeadParams {
    pub fn decl(prefix: &str, c_d: usize, num_classes: usize, attention: bool) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        if attention {
            for name in ["fc_a", "fc_b", "fc_d"] {
                out.extend(Linear::decl(&format!("{prefix}.{name}"), c_d, c_d));
            }
        }
        out.extend(Linear::decl(&format!("{prefix}.classifier"), c_d, num_classes));
        out
    }

    pub fn bind(bound: &Bound, prefix: &str, attention: bool) -> Result<Self> {
        let attention = if attention {
            Some(AttentionParams {
                fc_a: Linear::bind(bound, &format!("{prefix}.fc_a"))?,
                fc_b: Linear::bind(bound, &format!("{prefix}.fc_b"))?,
                fc_d: Linear::bind(bound, &format!("{prefix}.fc_d"))?,
            })
        } else {
            None
        };
        Ok(Self {
            attention,
            classifier: Linear::bind(bound, &format!("{prefix}.classifier"))?,
        })
    }
}

/// Attended term `Σ_j v_ij D_j`; its attention weights are `v`.
pub fn spatial_context(g: &mut Graph, f: Var, params: &AttentionParams) -> Result<Var> {
    let a = params.fc_a.forward(g, f)?;
    let b = params.fc_b.forward(g, f)?;
    let d = params.fc_d.forward(g, f)?;
    g.attention(a, b, d, 1, None)
}

pub fn spatial_attention(g: &mut Graph, f: Var, params: &AttentionParams) -> Result<Var> {
    let attended = spatial_context(g, f, params)?;
    g.add(attended, f)
}

/// Channel map `M` (`C_d × C_d`), each column a softmax over source channels.
pub fn channel_weights(g: &mut Graph, f: Var) -> Result<Var> {
    let energy = g.gram(f)?;
    let energy_t = g.transpose(energy)?;
    let m_t = g.softmax_rows(energy_t)?;
    g.transpose(m_t)
}

pub fn channel_attention(g: &mut Graph, f: Var) -> Result<Var> {
    let m = channel_weights(g, f)?;
    let mixed = g.matmul(f, m)?;
    g.add(mixed, f)
}

/// Logits `fc(F̂ + F̃)`, or `fc(F)` without attention.
pub fn classify(g: &mut Graph, f: Var, params: &HeadParams) -> Result<Var> {
    let fused = match &params.attention {
        Some(att) => {
            let f_hat = spatial_attention(g, f, att)?;
            let f_tilde = channel_attention(g, f)?;
            g.add(f_hat, f_tilde)?
        }
        None => f,
    };
    params.classifier.forward(g, fused)
}

/// Row-wise argmax; ties go to the lowest class id.
pub fn predict_labels(logits: &[f64], num_classes: usize) -> Vec<usize> {
    logits
        .chunks(num_classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tensor};

    fn linear(g: &mut Graph, w: Vec<f64>, b: Vec<f64>, c_in: usize) -> Linear {
        let c_out = b.len();
        Linear {
            w: g.constant(&Tensor::new(vec![c_in, c_out], w).unwrap()),
            b: g.constant(&Tensor::new(vec![c_out], b).unwrap()),
        }
    }

    fn eye(c: usize) -> Vec<f64> {
        (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn singleton_spatial_attention() {
        let mut g = Graph::new(Precision::F64);
        let d = vec![2.0, 0.0, 0.0, 2.0];
        let att = AttentionParams {
            fc_a: linear(&mut g, eye(2), vec![0.0; 2], 2),
            fc_b: linear(&mut g, eye(2), vec![0.0; 2], 2),
            fc_d: linear(&mut g, d, vec![0.0; 2], 2),
        };
        let f = g.constant(&Tensor::from_rows(&[vec![1.5, -0.5]]).unwrap());
        let out = spatial_attention(&mut g, f, &att).unwrap();
        assert_eq!(g.value(out), &[4.5, -1.5]);
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut g = Graph::new(Precision::F64);
        let att = AttentionParams {
            fc_a: linear(&mut g, vec![0.3, -0.2, 0.9, 0.4], vec![0.1, 0.0], 2),
            fc_b: linear(&mut g, vec![-0.7, 0.5, 0.2, 0.8], vec![0.0, 0.3], 2),
            fc_d: linear(&mut g, vec![0.0; 4], vec![0.0; 2], 2),
        };
        let rows = vec![vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, -1.0]];
        let f = g.constant(&Tensor::from_rows(&rows).unwrap());
        let out = spatial_attention(&mut g, f, &att).unwrap();
        assert_eq!(g.value(out), g.value(f));
    }

    #[test]
    fn single_channel_doubles() {
        let mut g = Graph::new(Precision::F64);
        let f = g.constant(&Tensor::from_rows(&[vec![1.0], vec![-3.0], vec![0.5]]).unwrap());
        let out = channel_attention(&mut g, f).unwrap();
        assert_eq!(g.value(out), &[2.0, -6.0, 1.0]);
    }

    #[test]
    fn zero_input_channel_attention() {
        let mut g = Graph::new(Precision::F64);
        let f = g.constant(&Tensor::zeros(vec![4, 3]).unwrap());
        let out = channel_attention(&mut g, f).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_dominant_classifier() {
        let mut g = Graph::new(Precision::F64);
        let params = HeadParams {
            attention: None,
            classifier: linear(&mut g, vec![0.0; 6], vec![0.0, 1.0], 3),
        };
        let f = g.constant(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.0, 9.0]]).unwrap());
        let logits = classify(&mut g, f, &params).unwrap();
        assert_eq!(predict_labels(g.value(logits), 2), vec![1, 1]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(predict_labels(&[2.0, 2.0, 1.0, 3.0, 3.0, 0.0], 3), vec![0, 0]);
    }
}
