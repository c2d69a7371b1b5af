//! Continuous (multiplicative Gaussian) dropout.

use ndarray::Array5;
use rand_distr::{Distribution, Normal};

use super::Rng;

/// Multiplies activations by `N(1, p / (1 - p))` noise during training,
/// matching the keep-rate variance of Bernoulli dropout with rate `p`.
/// Inference is the identity, so no rescaling is needed.
#[derive(Debug, Clone)]
pub struct ContinuousDropout {
    pub rate: f64,
    cache_noise: Option<Array5<f64>>,
}

impl ContinuousDropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        ContinuousDropout { rate, cache_noise: None }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0
    }

    pub fn infer(&self, x: &Array5<f64>) -> Array5<f64> {
        x.clone()
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>, rng: &mut Rng) -> Array5<f64> {
        if !self.is_active() {
            self.cache_noise = None;
            return x.clone();
        }
        let sigma = (self.rate / (1.0 - self.rate)).sqrt();
        let dist = Normal::new(1.0, sigma).expect("valid sigma");
        let noise = Array5::from_shape_fn(x.dim(), |_| dist.sample(rng));
        let y = x * &noise;
        self.cache_noise = Some(noise);
        y
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        match self.cache_noise.take() {
            Some(noise) => dy * &noise,
            None => dy.clone(),
        }
    }
}
