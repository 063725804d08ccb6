#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;

use elgs_core::backbone::ModelParams;
use elgs_core::nn::{Bound, Linear};
use elgs_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oracle::{Lin, Rows};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, c: usize, scale: f64) -> Rows {
    (0..n).map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<[f64; 3]> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(0.0..extent))).collect()
}

pub fn random_lin(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, scale: f64) -> Lin {
    Lin {
        w: random_rows(rng, c_in, c_out, scale),
        b: (0..c_out).map(|_| rng.random_range(-scale..scale)).collect(),
    }
}

pub fn tensor(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Registers named dense layers as graph parameters.
pub fn bind_lins(g: &mut Graph, lins: &[(&str, &Lin)]) -> (Bound, Vec<Linear>) {
    let mut map = BTreeMap::new();
    for (name, lin) in lins {
        map.insert(format!("{name}.w"), tensor(&lin.w));
        map.insert(format!("{name}.b"), Tensor::new(vec![lin.b.len()], lin.b.clone()).unwrap());
    }
    let bound = ModelParams::from_tensors(map).bind(g);
    let linears = lins.iter().map(|(name, _)| Linear::bind(&bound, name).unwrap()).collect();
    (bound, linears)
}

pub fn rows_of(g: &Graph, v: Var) -> Rows {
    let cols = g.shape(v)[1];
    g.value(v).chunks(cols).map(<[f64]>::to_vec).collect()
}
