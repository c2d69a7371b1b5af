//! Minimal deterministic f64 neural-net substrate.
//!
//! Layers own their parameters, gradients and (training-only) caches.
//! `infer` is a pure `&self` pass, `train_fwd` caches what `backward`
//! needs. All reductions run in a fixed order, so results are
//! bit-identical run to run for the same seed.

pub mod act;
pub mod conv;
pub mod dropout;
pub mod linear;
pub mod norm;
pub mod pool;

#[cfg(test)]
pub(crate) mod testutil;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use act::{h_swish, h_swish_grad, hard_sigmoid, hard_sigmoid_grad, sigmoid, Activation, ActKind};
pub use conv::{Conv3d, DepthwiseConv3d, PadMode};
pub use dropout::ContinuousDropout;
pub use linear::Linear;
pub use norm::BatchNorm;
pub use pool::{GlobalAvgPool, TemporalAvgPool};

/// Deterministic RNG used across the crate.
pub type Rng = ChaCha8Rng;

/// One trainable array: value, gradient accumulator, SGD momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub vel: ArrayD<f64>,
    /// Whether weight decay applies (false for norm scales and biases).
    pub decay: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>, decay: bool) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let vel = ArrayD::zeros(value.raw_dim());
        Param { value, grad, vel, decay }
    }

    pub fn zeros(shape: &[usize], decay: bool) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)), decay)
    }

    /// He-style init: normal with std `sqrt(2 / fan_out)`.
    pub fn he_fan_out(shape: &[usize], fan_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_out as f64).sqrt();
        Self::normal(shape, std, rng)
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng));
        Self::new(value, true)
    }

    pub fn count(&self) -> u64 {
        self.value.len() as u64
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Callback type used to walk every parameter of a model by canonical name.
pub type ParamVisitor<'a> = dyn FnMut(String, &mut Param) + 'a;

/// Callback type for non-trainable state (normalization running stats).
pub type BufferVisitor<'a> = dyn FnMut(String, &mut ArrayD<f64>) + 'a;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
