//! Batch normalization over `(N, C, T, H, W)` feature maps.

use ndarray::{Array1, Array5, ArrayD, Axis, IxDyn};

use super::{join, BufferVisitor, Param, ParamVisitor};

/// Per-channel batch norm. Statistics are taken over every axis except the
/// channel one. Biased variance is used both for normalization and for the
/// running estimate, so train and eval agree exactly once the running stats
/// have converged on a fixed batch.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Array5<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Param::new(ArrayD::ones(IxDyn(&[channels])), false);
        gamma.vel.fill(0.0);
        let beta = Param::zeros(&[channels], false);
        BatchNorm {
            gamma,
            beta,
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            eps: 1e-3,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn param_count(&self) -> u64 {
        self.gamma.count() + self.beta.count()
    }

    pub fn infer(&self, x: &Array5<f64>) -> Array5<f64> {
        let c = self.channels();
        debug_assert_eq!(x.dim().1, c);
        let mut y = x.clone();
        for ci in 0..c {
            let mean = self.running_mean[[ci]];
            let inv_std = 1.0 / (self.running_var[[ci]] + self.eps).sqrt();
            let g = self.gamma.value[[ci]];
            let b = self.beta.value[[ci]];
            y.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| (v - mean) * inv_std * g + b);
        }
        y
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>) -> Array5<f64> {
        let (n, c, t, h, w) = x.dim();
        debug_assert_eq!(c, self.channels());
        let m = (n * t * h * w) as f64;

        let mut x_hat = x.clone();
        let mut inv_std = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let lane = x.index_axis(Axis(1), ci);
            let mean = lane.sum() / m;
            let var = lane.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / m;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = is;
            x_hat
                .index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| (v - mean) * is);
            self.running_mean[[ci]] = (1.0 - self.momentum) * self.running_mean[[ci]] + self.momentum * mean;
            self.running_var[[ci]] = (1.0 - self.momentum) * self.running_var[[ci]] + self.momentum * var;
        }

        let mut y = x_hat.clone();
        for ci in 0..c {
            let g = self.gamma.value[[ci]];
            let b = self.beta.value[[ci]];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * g + b);
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let BnCache { x_hat, inv_std } = self.cache.take().expect("backward without train_fwd");
        let (n, c, t, h, w) = x_hat.dim();
        let m = (n * t * h * w) as f64;
        let mut dx = Array5::<f64>::zeros((n, c, t, h, w));

        for ci in 0..c {
            let dy_lane = dy.index_axis(Axis(1), ci);
            let xh_lane = x_hat.index_axis(Axis(1), ci);
            let sum_dy = dy_lane.sum();
            let sum_dy_xh = dy_lane
                .iter()
                .zip(xh_lane.iter())
                .fold(0.0, |acc, (&g, &xh)| acc + g * xh);
            self.beta.grad[[ci]] += sum_dy;
            self.gamma.grad[[ci]] += sum_dy_xh;

            let scale = self.gamma.value[[ci]] * inv_std[ci];
            let mean_dy = sum_dy / m;
            let mean_dy_xh = sum_dy_xh / m;
            let mut dx_lane = dx.index_axis_mut(Axis(1), ci);
            dx_lane
                .iter_mut()
                .zip(dy_lane.iter().zip(xh_lane.iter()))
                .for_each(|(d, (&g, &xh))| *d = scale * (g - mean_dy - xh * mean_dy_xh));
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor) {
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{assert_grads_close, numeric_grad, randn, rng};

    fn as5(a: ndarray::ArrayD<f64>) -> Array5<f64> {
        a.into_dimensionality().unwrap()
    }

    #[test]
    fn train_fwd_standardizes_each_channel() {
        let mut r = rng(21);
        let mut bn = BatchNorm::new(3);
        let x = as5(randn(&[4, 3, 2, 5, 5], &mut r) * 3.0 + 1.7);
        let y = bn.train_fwd(&x);
        let m = (4 * 2 * 5 * 5) as f64;
        for ci in 0..3 {
            let lane = y.index_axis(Axis(1), ci);
            let mean = lane.sum() / m;
            let var = lane.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / m;
            assert!(mean.abs() < 1e-12, "channel {ci} mean {mean}");
            // Biased batch variance v maps to v/(v+eps), just under 1.
            assert!((var - 1.0).abs() < 1e-3, "channel {ci} var {var}");
        }
    }

    #[test]
    fn running_stats_follow_momentum_update() {
        let mut r = rng(22);
        let mut bn = BatchNorm::new(2);
        let x = as5(randn(&[2, 2, 3, 4, 4], &mut r) * 2.0 + 0.5);
        let m = (2 * 3 * 4 * 4) as f64;
        bn.train_fwd(&x);
        for ci in 0..2 {
            let lane = x.index_axis(Axis(1), ci);
            let mean = lane.sum() / m;
            let var = lane.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / m;
            assert!((bn.running_mean[[ci]] - 0.1 * mean).abs() < 1e-12);
            assert!((bn.running_var[[ci]] - (0.9 + 0.1 * var)).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_uses_running_stats_only() {
        let mut r = rng(23);
        let mut bn = BatchNorm::new(2);
        bn.running_mean[[0]] = 1.0;
        bn.running_mean[[1]] = -2.0;
        bn.running_var[[0]] = 4.0;
        bn.running_var[[1]] = 0.25;
        bn.gamma.value[[1]] = 3.0;
        bn.beta.value[[1]] = 0.5;
        let x = as5(randn(&[1, 2, 1, 2, 2], &mut r));
        let y = bn.infer(&x);
        for (idx, &v) in x.indexed_iter() {
            let (mean, var, g, b) = if idx.1 == 0 {
                (1.0, 4.0, 1.0, 0.0)
            } else {
                (-2.0, 0.25, 3.0, 0.5)
            };
            let want = (v - mean) / (var + 1e-3f64).sqrt() * g + b;
            assert!((y[idx] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng(24);
        let mut bn = BatchNorm::new(2);
        bn.gamma.value = randn(&[2], &mut r).mapv(|v| 1.0 + 0.3 * v);
        bn.beta.value = randn(&[2], &mut r);
        let x = as5(randn(&[2, 2, 2, 3, 3], &mut r));
        let y = bn.train_fwd(&x);
        let proj = randn(y.shape(), &mut r);
        let dx = bn.backward(&as5(proj.clone()));

        let loss = |bn: &BatchNorm, x: &Array5<f64>| {
            let mut b = bn.clone();
            (&b.train_fwd(x).into_dyn() * &proj).sum()
        };
        let num_dx = numeric_grad(&x.clone().into_dyn(), 1e-5, |xp| loss(&bn, &as5(xp.clone())));
        assert_grads_close(&dx.into_dyn(), &num_dx, 1e-7, 1e-4, "bn dx");

        let num_dg = numeric_grad(&bn.gamma.value.clone(), 1e-5, |gp| {
            let mut b = bn.clone();
            b.gamma.value = gp.clone();
            loss(&b, &x)
        });
        assert_grads_close(&bn.gamma.grad, &num_dg, 1e-7, 1e-4, "bn dgamma");

        let num_db = numeric_grad(&bn.beta.value.clone(), 1e-5, |bp| {
            let mut b = bn.clone();
            b.beta.value = bp.clone();
            loss(&b, &x)
        });
        assert_grads_close(&bn.beta.grad, &num_db, 1e-7, 1e-4, "bn dbeta");
    }

    #[test]
    fn scale_and_shift_are_excluded_from_weight_decay() {
        let mut bn = BatchNorm::new(1);
        let mut decays = Vec::new();
        bn.visit_params("bn", &mut |_, p| decays.push(p.decay));
        assert_eq!(decays, vec![false, false]);
    }
}
