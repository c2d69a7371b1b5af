//! Shared helpers for gradient checks in unit tests.

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::Rng;

pub(crate) fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub(crate) fn randn(shape: &[usize], rng: &mut Rng) -> ArrayD<f64> {
    let dist = Normal::new(0.0, 1.0).unwrap();
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| dist.sample(rng))
}

/// Central-difference gradient of a scalar function wrt every element of `x`.
pub(crate) fn numeric_grad(x: &ArrayD<f64>, eps: f64, mut f: impl FnMut(&ArrayD<f64>) -> f64) -> ArrayD<f64> {
    let mut g = ArrayD::<f64>::zeros(x.raw_dim());
    let mut xp = x.clone();
    let n = x.len();
    for i in 0..n {
        let orig = xp.as_slice().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + eps;
        let up = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - eps;
        let down = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * eps);
    }
    g
}

/// Asserts element-wise `|a - b| <= atol + rtol * |b|`.
pub(crate) fn assert_grads_close(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, atol: f64, rtol: f64, what: &str) {
    assert_eq!(analytic.shape(), numeric.shape(), "{what}: shape mismatch");
    for (i, (&a, &b)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let tol = atol + rtol * b.abs();
        assert!(
            (a - b).abs() <= tol,
            "{what}: grad[{i}] analytic {a} vs numeric {b} (tol {tol})"
        );
    }
}
