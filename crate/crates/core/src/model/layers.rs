use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Float, Param, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Anything that owns parameters.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param));
}

/// Creates parameters in a fixed order with sequential ids and seeded init.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    next_id: usize,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.next_id
    }

    fn make(&mut self, name: String, tensor: Tensor<f32>) -> Param {
        let p = Param::new(name, self.next_id, tensor);
        self.next_id += 1;
        p
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Param {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng) as f32);
        self.make(name, t)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f32) -> Param {
        self.make(name, Tensor::full(shape.to_vec(), value))
    }
}

/// `y = x · W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = pb.normal(format!("{name}.weight"), &[d_in, d_out], INIT_STD);
        let bias = bias.then(|| pb.constant(format!("{name}.bias"), &[d_out], 0.0));
        Self { weight, bias }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self {
            weight: pb.constant(format!("{name}.weight"), &[dim], 1.0),
            bias: pb.constant(format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.layernorm(x, g, b, LN_EPS)
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
