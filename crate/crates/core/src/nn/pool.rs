//! Average pooling: temporal (decimating) and global (per-clip).

use ndarray::{s, Array2, Array5};

/// Average pool along the temporal axis only. Used instead of temporal
/// stride in convolutions, so every conv keeps stride 1 in time.
#[derive(Debug, Clone)]
pub struct TemporalAvgPool {
    pub kernel: usize,
    pub stride: usize,
    cache_in_t: Option<usize>,
}

impl TemporalAvgPool {
    pub fn new(kernel: usize, stride: usize) -> Self {
        TemporalAvgPool { kernel, stride, cache_in_t: None }
    }

    pub fn out_t(&self, t: usize) -> usize {
        assert!(t >= self.kernel, "temporal pool kernel {} exceeds input length {t}", self.kernel);
        (t - self.kernel) / self.stride + 1
    }

    pub fn infer(&self, x: &Array5<f64>) -> Array5<f64> {
        let (n, c, t, h, w) = x.dim();
        let to = self.out_t(t);
        let inv = 1.0 / self.kernel as f64;
        let mut y = Array5::<f64>::zeros((n, c, to, h, w));
        for ot in 0..to {
            for dt in 0..self.kernel {
                let src = x.slice(s![.., .., ot * self.stride + dt, .., ..]);
                let mut dst = y.slice_mut(s![.., .., ot, .., ..]);
                dst.zip_mut_with(&src, |d, &v| *d += v * inv);
            }
        }
        y
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>) -> Array5<f64> {
        self.cache_in_t = Some(x.dim().2);
        self.infer(x)
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let t = self.cache_in_t.take().expect("backward without train_fwd");
        let (n, c, to, h, w) = dy.dim();
        let inv = 1.0 / self.kernel as f64;
        let mut dx = Array5::<f64>::zeros((n, c, t, h, w));
        for ot in 0..to {
            for dt in 0..self.kernel {
                let mut dst = dx.slice_mut(s![.., .., ot * self.stride + dt, .., ..]);
                let src = dy.slice(s![.., .., ot, .., ..]);
                dst.zip_mut_with(&src, |d, &v| *d += v * inv);
            }
        }
        dx
    }
}

/// Mean over the spatial plane only, keeping `(N, C, T, 1, 1)`.
pub(crate) fn spatial_mean(x: &Array5<f64>) -> Array5<f64> {
    let (n, c, t, h, w) = x.dim();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Array5::<f64>::zeros((n, c, t, 1, 1));
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                out[[ni, ci, ti, 0, 0]] = x.slice(s![ni, ci, ti, .., ..]).sum() * inv;
            }
        }
    }
    out
}

/// Mean over all of `(T, H, W)`, producing one vector per clip.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache_in: Option<(usize, usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer(&self, x: &Array5<f64>) -> Array2<f64> {
        let (n, c, t, h, w) = x.dim();
        let inv = 1.0 / (t * h * w) as f64;
        let mut y = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                y[[ni, ci]] = x.slice(s![ni, ci, .., .., ..]).sum() * inv;
            }
        }
        y
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>) -> Array2<f64> {
        self.cache_in = Some(x.dim());
        self.infer(x)
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array5<f64> {
        let (n, c, t, h, w) = self.cache_in.take().expect("backward without train_fwd");
        let inv = 1.0 / (t * h * w) as f64;
        let mut dx = Array5::<f64>::zeros((n, c, t, h, w));
        for ni in 0..n {
            for ci in 0..c {
                dx.slice_mut(s![ni, ci, .., .., ..]).fill(dy[[ni, ci]] * inv);
            }
        }
        dx
    }
}
