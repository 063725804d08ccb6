//! Parameter declarations and graph bindings shared by the network modules.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Parameter handles of one forward graph, by name.
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub(crate) fn insert(&mut self, name: String, v: Var) {
        self.vars.insert(name, v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Fully connected layer `x·w + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn decl(prefix: &str, c_in: usize, c_out: usize) -> Vec<ParamDecl> {
        vec![
            ParamDecl {
                name: format!("{prefix}.w"),
                shape: vec![c_in, c_out],
                init: Init::Glorot {
                    fan_in: c_in,
                    fan_out: c_out,
                },
            },
            ParamDecl {
                name: format!("{prefix}.b"),
                shape: vec![c_out],
                init: Init::Zeros,
            },
        ]
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: bound.get(&format!("{prefix}.w"))?,
            b: bound.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.fc(x, self.w, self.b)
    }
}

/// Stack of `Linear` + ReLU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn decl(prefix: &str, c_in: usize, width: usize, depth: usize) -> Vec<ParamDecl> {
        (0..depth)
            .flat_map(|j| Linear::decl(&format!("{prefix}.mlp{j}"), if j == 0 { c_in } else { width }, width))
            .collect()
    }

    pub fn bind(bound: &Bound, prefix: &str, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|j| Linear::bind(bound, &format!("{prefix}.mlp{j}")))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            let h = layer.forward(g, x)?;
            x = g.relu(h);
        }
        Ok(x)
    }
}
