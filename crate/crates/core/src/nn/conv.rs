//! Dense and depth-wise 3D convolutions with explicit backward passes.
//!
//! Dense convolutions run as im2col + GEMM per sample; a pointwise
//! (1x1x1, stride 1) fast path skips the im2col entirely. Depth-wise
//! convolutions are computed directly — their arithmetic cost is tiny
//! compared to the pointwise layers.

use ndarray::{s, Array2, Array5, ArrayView2, ArrayViewMut2};
use ndarray::linalg::general_mat_mul;

use super::{join, Param, ParamVisitor, Rng};
use crate::{Error, Result};

fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Dense 3D convolution, weight layout `(Co, Ci, Kt, Kh, Kw)`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
    cache_x: Option<Array5<f64>>,
}

impl Conv3d {
    pub fn new(
        ci: usize,
        co: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let (kt, kh, kw) = kernel;
        let fan_out = co * kt * kh * kw;
        let weight = Param::he_fan_out(&[co, ci, kt, kh, kw], fan_out, rng);
        let bias = bias.then(|| {
            let mut p = Param::zeros(&[co], false);
            p.decay = false;
            p
        });
        Conv3d { weight, bias, stride, pad, cache_x: None }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[2], s[3], s[4])
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == (1, 1, 1) && self.stride == (1, 1, 1) && self.pad == (0, 0, 0)
    }

    pub fn out_shape(&self, in_shape: (usize, usize, usize, usize)) -> Result<(usize, usize, usize, usize)> {
        let (ci, t, h, w) = in_shape;
        if ci != self.in_channels() {
            return Err(Error::shape("conv input channels", self.in_channels(), ci));
        }
        let (kt, kh, kw) = self.kernel();
        Ok((
            self.out_channels(),
            out_dim(t, kt, self.stride.0, self.pad.0)?,
            out_dim(h, kh, self.stride.1, self.pad.1)?,
            out_dim(w, kw, self.stride.2, self.pad.2)?,
        ))
    }

    /// Parameter count and multiply-accumulates for one forward pass.
    pub fn stats(&self, in_shape: (usize, usize, usize, usize)) -> Result<(u64, u64, (usize, usize, usize, usize))> {
        let out = self.out_shape(in_shape)?;
        let params = self.weight.count() + self.bias.as_ref().map_or(0, Param::count);
        let macs = self.weight.count() * (out.1 * out.2 * out.3) as u64;
        Ok((params, macs, out))
    }

    pub fn infer(&self, x: &Array5<f64>) -> Result<Array5<f64>> {
        self.run(x)
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>) -> Result<Array5<f64>> {
        let y = self.run(x)?;
        self.cache_x = Some(x.clone());
        Ok(y)
    }

    fn run(&self, x: &Array5<f64>) -> Result<Array5<f64>> {
        let (n, ci, t, h, w) = x.dim();
        let (co, to, ho, wo) = self.out_shape((ci, t, h, w))?;
        let mut y = Array5::<f64>::zeros((n, co, to, ho, wo));
        let l = to * ho * wo;
        let (kt, kh, kw) = self.kernel();
        let k_all = ci * kt * kh * kw;
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape_with_order((co, k_all))
            .expect("weight is contiguous");

        if self.is_pointwise() {
            for ni in 0..n {
                let xn = x.slice(s![ni, .., .., .., ..]);
                let xn = xn.into_shape_with_order((ci, l)).expect("contiguous sample");
                let mut yn = y.slice_mut(s![ni, .., .., .., ..]);
                let yn = yn.view_mut().into_shape_with_order((co, l)).expect("contiguous sample");
                gemm_into(&w_mat, &xn, yn);
            }
        } else {
            let mut cols = Array2::<f64>::zeros((k_all, l));
            for ni in 0..n {
                self.im2col(x, ni, &mut cols, (to, ho, wo));
                let mut yn = y.slice_mut(s![ni, .., .., .., ..]);
                let yn = yn.view_mut().into_shape_with_order((co, l)).expect("contiguous sample");
                gemm_into(&w_mat, &cols.view(), yn);
            }
        }

        if let Some(b) = &self.bias {
            let b = b.value.view().into_shape_with_order(co).unwrap();
            for ni in 0..n {
                for c in 0..co {
                    y.slice_mut(s![ni, c, .., .., ..]).mapv_inplace(|v| v + b[c]);
                }
            }
        }
        Ok(y)
    }

    /// Backward pass; accumulates weight/bias grads, returns input grad.
    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let x = self.cache_x.take().expect("backward without train_fwd");
        let (n, ci, t, h, w) = x.dim();
        let (dn, co, to, ho, wo) = dy.dim();
        debug_assert_eq!(dn, n);
        let l = to * ho * wo;
        let (kt, kh, kw) = self.kernel();
        let k_all = ci * kt * kh * kw;

        let mut dx = Array5::<f64>::zeros((n, ci, t, h, w));
        let w_mat = self.weight.value.view().into_shape_with_order((co, k_all)).unwrap();
        let mut dw_local = Array2::<f64>::zeros((co, k_all));

        if self.is_pointwise() {
            for ni in 0..n {
                let xn = x.slice(s![ni, .., .., .., ..]);
                let xn = xn.into_shape_with_order((ci, l)).unwrap();
                let dyn_ = dy.slice(s![ni, .., .., .., ..]);
                let dyn_ = dyn_.into_shape_with_order((co, l)).unwrap();
                general_mat_mul(1.0, &dyn_, &xn.t(), 1.0, &mut dw_local.view_mut());
                let mut dxn = dx.slice_mut(s![ni, .., .., .., ..]);
                let dxn = dxn.view_mut().into_shape_with_order((ci, l)).unwrap();
                gemm_into(&w_mat.t(), &dyn_, dxn);
            }
        } else {
            let mut cols = Array2::<f64>::zeros((k_all, l));
            let mut dcols = Array2::<f64>::zeros((k_all, l));
            for ni in 0..n {
                self.im2col(&x, ni, &mut cols, (to, ho, wo));
                let dyn_ = dy.slice(s![ni, .., .., .., ..]);
                let dyn_ = dyn_.into_shape_with_order((co, l)).unwrap();
                general_mat_mul(1.0, &dyn_, &cols.t(), 1.0, &mut dw_local.view_mut());
                gemm_into(&w_mat.t(), &dyn_, dcols.view_mut());
                self.col2im(&mut dx, ni, &dcols, (to, ho, wo));
            }
        }

        {
            let mut g = self.weight.grad.view_mut().into_shape_with_order((co, k_all)).unwrap();
            g += &dw_local;
        }
        if let Some(b) = &mut self.bias {
            let mut g = b.grad.view_mut().into_shape_with_order(co).unwrap();
            for ni in 0..n {
                for c in 0..co {
                    g[c] += dy.slice(s![ni, c, .., .., ..]).sum();
                }
            }
        }
        dx
    }

    fn im2col(&self, x: &Array5<f64>, ni: usize, cols: &mut Array2<f64>, out: (usize, usize, usize)) {
        let (_, ci, t, h, w) = x.dim();
        let (to, ho, wo) = out;
        let (kt, kh, kw) = self.kernel();
        let (st, sh, sw) = self.stride;
        let (pt, ph, pw) = self.pad;
        let xs = x.slice(s![ni, .., .., .., ..]);
        let xs = xs.as_slice().expect("contiguous sample");
        let cs = cols.as_slice_mut().expect("contiguous cols");
        let l = to * ho * wo;

        let mut row = 0usize;
        for c in 0..ci {
            let base_c = c * t * h * w;
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw_ in 0..kw {
                        let dst_row = &mut cs[row * l..(row + 1) * l];
                        let mut di = 0usize;
                        for ot in 0..to {
                            let ts = (ot * st + dt) as isize - pt as isize;
                            if ts < 0 || ts >= t as isize {
                                dst_row[di..di + ho * wo].fill(0.0);
                                di += ho * wo;
                                continue;
                            }
                            let base_t = base_c + ts as usize * h * w;
                            for oh in 0..ho {
                                let hs = (oh * sh + dh) as isize - ph as isize;
                                if hs < 0 || hs >= h as isize {
                                    dst_row[di..di + wo].fill(0.0);
                                    di += wo;
                                    continue;
                                }
                                let base_h = base_t + hs as usize * w;
                                if sw == 1 {
                                    let ws0 = dw_ as isize - pw as isize;
                                    // contiguous run, clip the padded edges
                                    let lo = (-ws0).max(0) as usize; // first ow with valid src
                                    let hi = ((w as isize - ws0).min(wo as isize)).max(0) as usize;
                                    dst_row[di..di + lo.min(wo)].fill(0.0);
                                    if hi > lo {
                                        let src0 = (ws0 + lo as isize) as usize;
                                        dst_row[di + lo..di + hi]
                                            .copy_from_slice(&xs[base_h + src0..base_h + src0 + (hi - lo)]);
                                    }
                                    if wo > hi {
                                        dst_row[di + hi..di + wo].fill(0.0);
                                    }
                                    di += wo;
                                } else {
                                    for ow in 0..wo {
                                        let ws = (ow * sw + dw_) as isize - pw as isize;
                                        dst_row[di] = if ws < 0 || ws >= w as isize {
                                            0.0
                                        } else {
                                            xs[base_h + ws as usize]
                                        };
                                        di += 1;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn col2im(&self, dx: &mut Array5<f64>, ni: usize, dcols: &Array2<f64>, out: (usize, usize, usize)) {
        let (_, ci, t, h, w) = dx.dim();
        let (to, ho, wo) = out;
        let (kt, kh, kw) = self.kernel();
        let (st, sh, sw) = self.stride;
        let (pt, ph, pw) = self.pad;
        let mut dxn = dx.slice_mut(s![ni, .., .., .., ..]);
        let dxs = dxn.as_slice_mut().expect("contiguous sample");
        let cs = dcols.as_slice().expect("contiguous cols");
        let l = to * ho * wo;

        let mut row = 0usize;
        for c in 0..ci {
            let base_c = c * t * h * w;
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw_ in 0..kw {
                        let src_row = &cs[row * l..(row + 1) * l];
                        let mut di = 0usize;
                        for ot in 0..to {
                            let ts = (ot * st + dt) as isize - pt as isize;
                            if ts < 0 || ts >= t as isize {
                                di += ho * wo;
                                continue;
                            }
                            let base_t = base_c + ts as usize * h * w;
                            for oh in 0..ho {
                                let hs = (oh * sh + dh) as isize - ph as isize;
                                if hs < 0 || hs >= h as isize {
                                    di += wo;
                                    continue;
                                }
                                let base_h = base_t + hs as usize * w;
                                for ow in 0..wo {
                                    let ws = (ow * sw + dw_) as isize - pw as isize;
                                    if ws >= 0 && ws < w as isize {
                                        dxs[base_h + ws as usize] += src_row[di];
                                    }
                                    di += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Boundary handling for depth-wise convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Clamp out-of-range taps to the nearest edge sample.
    Replicate,
}

/// Resolve a padded source index; `None` means a zero tap.
#[inline]
fn resolve(mode: PadMode, idx: isize, dim: usize) -> Option<usize> {
    if idx >= 0 && (idx as usize) < dim {
        Some(idx as usize)
    } else {
        match mode {
            PadMode::Zeros => None,
            PadMode::Replicate => Some(idx.clamp(0, dim as isize - 1) as usize),
        }
    }
}

/// Depth-wise 3D convolution, weight layout `(C, Kt, Kh, Kw)`, no bias.
///
/// Temporal stride is always 1: temporal downsampling is done by average
/// pooling, never by strided temporal kernels.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3d {
    pub weight: Param,
    pub stride_spatial: usize,
    pub pad: (usize, usize, usize),
    pub pad_mode: PadMode,
    cache_x: Option<Array5<f64>>,
}

impl DepthwiseConv3d {
    pub fn new(
        channels: usize,
        kernel: (usize, usize, usize),
        stride_spatial: usize,
        pad: (usize, usize, usize),
        pad_mode: PadMode,
        rng: &mut Rng,
    ) -> Self {
        let (kt, kh, kw) = kernel;
        let weight = Param::he_fan_out(&[channels, kt, kh, kw], kt * kh * kw, rng);
        DepthwiseConv3d { weight, stride_spatial, pad, pad_mode, cache_x: None }
    }

    pub fn channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[1], s[2], s[3])
    }

    pub fn out_shape(&self, in_shape: (usize, usize, usize, usize)) -> Result<(usize, usize, usize, usize)> {
        let (c, t, h, w) = in_shape;
        if c != self.channels() {
            return Err(Error::shape("depthwise conv channels", self.channels(), c));
        }
        let (kt, kh, kw) = self.kernel();
        Ok((
            c,
            out_dim(t, kt, 1, self.pad.0)?,
            out_dim(h, kh, self.stride_spatial, self.pad.1)?,
            out_dim(w, kw, self.stride_spatial, self.pad.2)?,
        ))
    }

    pub fn stats(&self, in_shape: (usize, usize, usize, usize)) -> Result<(u64, u64, (usize, usize, usize, usize))> {
        let out = self.out_shape(in_shape)?;
        let params = self.weight.count();
        let macs = params * (out.1 * out.2 * out.3) as u64;
        Ok((params, macs, out))
    }

    pub fn infer(&self, x: &Array5<f64>) -> Result<Array5<f64>> {
        self.run(x)
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>) -> Result<Array5<f64>> {
        let y = self.run(x)?;
        self.cache_x = Some(x.clone());
        Ok(y)
    }

    fn run(&self, x: &Array5<f64>) -> Result<Array5<f64>> {
        let (n, c, t, h, w) = x.dim();
        let (_, to, ho, wo) = self.out_shape((c, t, h, w))?;
        let (kt, kh, kw) = self.kernel();
        let ss = self.stride_spatial;
        let (pt, ph, pw) = self.pad;
        let mut y = Array5::<f64>::zeros((n, c, to, ho, wo));

        for ni in 0..n {
            for ci in 0..c {
                let xcv = x.slice(s![ni, ci, .., .., ..]);
                let xc = xcv.as_slice().expect("contiguous channel");
                let kv = self.weight.value.slice(s![ci, .., .., ..]);
                let mut ycv = y.slice_mut(s![ni, ci, .., .., ..]);
                let yc = ycv.as_slice_mut().unwrap();
                let mut oi = 0usize;
                for ot in 0..to {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut acc = 0.0;
                            for dt in 0..kt {
                                let Some(ts) = resolve(self.pad_mode, (ot + dt) as isize - pt as isize, t) else { continue };
                                for dh in 0..kh {
                                    let Some(hs) = resolve(self.pad_mode, (oh * ss + dh) as isize - ph as isize, h) else { continue };
                                    let base = ts * h * w + hs * w;
                                    for dw_ in 0..kw {
                                        let Some(ws) = resolve(self.pad_mode, (ow * ss + dw_) as isize - pw as isize, w) else { continue };
                                        acc += kv[[dt, dh, dw_]] * xc[base + ws];
                                    }
                                }
                            }
                            yc[oi] = acc;
                            oi += 1;
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let x = self.cache_x.take().expect("backward without train_fwd");
        let (n, c, t, h, w) = x.dim();
        let (_, _, to, ho, wo) = dy.dim();
        let (kt, kh, kw) = self.kernel();
        let ss = self.stride_spatial;
        let (pt, ph, pw) = self.pad;
        let mut dx = Array5::<f64>::zeros((n, c, t, h, w));

        for ni in 0..n {
            for ci in 0..c {
                let xcv = x.slice(s![ni, ci, .., .., ..]);
                let xc = xcv.as_slice().unwrap();
                let kv = self.weight.value.slice(s![ci, .., .., ..]);
                let mut gkv = self.weight.grad.slice_mut(s![ci, .., .., ..]);
                let dycv = dy.slice(s![ni, ci, .., .., ..]);
                let dyc = dycv.as_slice().unwrap();
                let mut dxcv = dx.slice_mut(s![ni, ci, .., .., ..]);
                let dxc = dxcv.as_slice_mut().unwrap();
                let mut oi = 0usize;
                for ot in 0..to {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let g = dyc[oi];
                            oi += 1;
                            if g == 0.0 {
                                continue;
                            }
                            for dt in 0..kt {
                                let Some(ts) = resolve(self.pad_mode, (ot + dt) as isize - pt as isize, t) else { continue };
                                for dh in 0..kh {
                                    let Some(hs) = resolve(self.pad_mode, (oh * ss + dh) as isize - ph as isize, h) else { continue };
                                    let base = ts * h * w + hs * w;
                                    for dw_ in 0..kw {
                                        let Some(ws) = resolve(self.pad_mode, (ow * ss + dw_) as isize - pw as isize, w) else { continue };
                                        gkv[[dt, dh, dw_]] += xc[base + ws] * g;
                                        dxc[base + ws] += kv[[dt, dh, dw_]] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(join(prefix, "weight"), &mut self.weight);
    }
}

fn gemm_into(a: &ArrayView2<f64>, b: &ArrayView2<f64>, mut c: ArrayViewMut2<f64>) {
    general_mat_mul(1.0, a, b, 0.0, &mut c);
}
