//! Dense layer shared by the denoiser and the feature extractor.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// `N(0, 1/fan_in)` weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0f32, (1.0 / fan_in as f32).sqrt()).expect("valid std");
        let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::parameter(vec![fan_in, fan_out], w).expect("weight shape"),
            bias: Tensor::parameter(vec![fan_out], vec![0.0; fan_out]).expect("bias shape"),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> (Var, Var) {
        (g.leaf(&self.weight), g.leaf(&self.bias))
    }

    pub fn forward(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    /// Same arithmetic as [`Linear::forward`] without recording.
    pub fn apply(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let mut h = kernels::matmul(x, self.weight.data(), batch, self.fan_in(), self.fan_out());
        kernels::add_rows(&mut h, self.bias.data());
        h
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.weight.set_requires_grad(on);
        self.bias.set_requires_grad(on);
    }
}

pub fn silu_in_place(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = kernels::silu(*v));
}
