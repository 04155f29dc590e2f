//! Weight initialization schemes.

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// N(0, 2 / (fan_in + fan_out))
    #[default]
    XavierNormal,
    /// N(0, 2 / fan_in)
    HeNormal,
}

impl Init {
    pub fn std_dev(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::XavierNormal => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::HeNormal => (2.0 / fan_in as f64).sqrt(),
        }
    }

    /// A tensor of `shape` drawn with the given fans.
    pub fn sample(self, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> Tensor {
        normal(shape, self.std_dev(fan_in, fan_out), rng)
    }
}

/// Tensor of independent `N(0, std^2)` draws.
pub fn normal(shape: &[usize], std: f64, rng: &mut dyn RngCore) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
