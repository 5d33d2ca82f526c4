//! Parameterised building blocks shared by the adapters, the encoder and the
//! detection head.

use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Uniform samples in `[-bound, bound]`.
pub fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

/// Fully connected layer: `[n, d_in] -> [n, d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(d_in)`, bias zero.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(d_in as f64);
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[d_in, d_out], bound), trainable);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), trainable);
        Self { weight, bias, d_in, d_out }
    }

    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, trainable: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]), trainable);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), trainable);
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Affine layer normalisation over the channel axis.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, trainable: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one()), trainable);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]), trainable);
        Self { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}
