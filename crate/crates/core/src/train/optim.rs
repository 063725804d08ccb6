use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

fn grad_of<'a>(name: &str, t: &'a crate::tensor::Tensor) -> Result<&'a [f64]> {
    t.grad()
        .ok_or_else(|| Error::contract(format!("parameter '{name}' has no gradient")))
}

/// `p ← p − lr·g` for every parameter.
pub fn sgd_step(params: &mut ModelParams, lr: f64) -> Result<()> {
    for (name, t) in params.iter_mut() {
        let g = grad_of(name, t)?.to_vec();
        for (p, g) in t.data_mut().iter_mut().zip(g) {
            *p -= lr * g;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        for (name, t) in params.iter() {
            grad_of(name, t)?;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, t) in params.iter_mut() {
            let g = grad_of(name, t)?.to_vec();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, *lr),
            Optimizer::Adam(a) => a.step(params),
        }
    }
}
