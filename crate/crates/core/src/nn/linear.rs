//! Fully connected layer on `(N, D)` batches.

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;

use super::{join, Param, ParamVisitor, Rng};

/// `y = x W^T + b`, weight layout `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    cache_x: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let weight = Param::he_fan_out(&[d_out, d_in], d_out, rng);
        let bias = bias.then(|| {
            let mut p = Param::zeros(&[d_out], false);
            p.decay = false;
            p
        });
        Linear { weight, bias, cache_x: None }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn param_count(&self) -> u64 {
        self.weight.count() + self.bias.as_ref().map_or(0, Param::count)
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let n = x.dim().0;
        let mut y = Array2::<f64>::zeros((n, self.d_out()));
        let w = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.d_out(), self.d_in()))
            .unwrap();
        general_mat_mul(1.0, x, &w.t(), 0.0, &mut y);
        if let Some(b) = &self.bias {
            for mut row in y.rows_mut() {
                for (v, &bi) in row.iter_mut().zip(b.value.iter()) {
                    *v += bi;
                }
            }
        }
        y
    }

    pub fn train_fwd(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = self.infer(x);
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache_x.take().expect("backward without train_fwd");
        let (d_out, d_in) = (self.d_out(), self.d_in());
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((d_out, d_in))
                .unwrap();
            general_mat_mul(1.0, &dy.t(), &x.view(), 1.0, &mut gw);
        }
        if let Some(b) = &mut self.bias {
            for row in dy.rows() {
                for (g, &v) in b.grad.iter_mut().zip(row.iter()) {
                    *g += v;
                }
            }
        }
        let w = self
            .weight
            .value
            .view()
            .into_shape_with_order((d_out, d_in))
            .unwrap();
        let mut dx = Array2::<f64>::zeros(x.dim());
        general_mat_mul(1.0, dy, &w, 0.0, &mut dx);
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{assert_grads_close, numeric_grad, randn, rng};
    use ndarray::array;

    #[test]
    fn forward_matches_hand_computation() {
        let mut r = rng(51);
        let mut lin = Linear::new(2, 2, true, &mut r);
        lin.weight.value = array![[1.0, 2.0], [3.0, -1.0]].into_dyn();
        lin.bias.as_mut().unwrap().value = array![0.5, -0.5].into_dyn();
        let x = array![[1.0, 1.0], [2.0, 0.0]];
        let y = lin.infer(&x);
        // Row-major out[n][o] = sum_i w[o][i] x[n][i] + b[o].
        assert_eq!(y, array![[3.5, 1.5], [2.5, 5.5]]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng(52);
        let mut lin = Linear::new(3, 4, true, &mut r);
        lin.bias.as_mut().unwrap().value = randn(&[4], &mut r);
        let x: Array2<f64> = randn(&[5, 3], &mut r).into_dimensionality().unwrap();
        let y = lin.train_fwd(&x);
        let proj = randn(y.shape(), &mut r);
        let dx = lin.backward(&proj.clone().into_dimensionality().unwrap());

        let loss = |l: &Linear, x: &Array2<f64>| (&l.infer(x).into_dyn() * &proj).sum();
        let num_dx = numeric_grad(&x.clone().into_dyn(), 1e-5, |xp| {
            loss(&lin, &xp.clone().into_dimensionality().unwrap())
        });
        assert_grads_close(&dx.into_dyn(), &num_dx, 1e-8, 1e-6, "linear dx");

        let num_dw = numeric_grad(&lin.weight.value.clone(), 1e-5, |wp| {
            let mut l = lin.clone();
            l.weight.value = wp.clone();
            loss(&l, &x)
        });
        assert_grads_close(&lin.weight.grad, &num_dw, 1e-8, 1e-6, "linear dw");

        let num_db = numeric_grad(&lin.bias.as_ref().unwrap().value.clone(), 1e-5, |bp| {
            let mut l = lin.clone();
            l.bias.as_mut().unwrap().value = bp.clone();
            loss(&l, &x)
        });
        assert_grads_close(&lin.bias.as_ref().unwrap().grad, &num_db, 1e-8, 1e-6, "linear db");
    }

    #[test]
    fn param_count_includes_optional_bias() {
        let mut r = rng(53);
        assert_eq!(Linear::new(960, 256, false, &mut r).param_count(), 960 * 256);
        assert_eq!(Linear::new(8, 4, true, &mut r).param_count(), 8 * 4 + 4);
    }
}
