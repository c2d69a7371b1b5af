//! Residual spatio-temporal attention.
//!
//! Two independent branches predict a single-channel score map: a spatial
//! branch operating on the full feature map and a temporal branch operating
//! on spatially pooled features. Their sum is normalized to `[0, 1]` —
//! by a Gumbel-sigmoid sample during training, by a plain sigmoid at
//! inference — and applied residually as `y = x * (1 + mask)`.
//!
//! The auxiliary hard total-variation loss pushes the score maps towards
//! binary segmentations: each position is penalized by its distance to the
//! indicator `I(mean of neighbor scores > 0.5)`.

use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{s, Array, Array3, Array4, Array5, Dimension};
use rand_distr::{Distribution, Gumbel};

use crate::nn::pool::spatial_mean;
use crate::nn::{
    sigmoid, ActKind, Activation, BatchNorm, BufferVisitor, Conv3d, DepthwiseConv3d, PadMode,
    ParamVisitor, Rng,
};
use crate::{Error, Result};

/// Score/logit pair for one clip, shape `(T, M, N)`.
#[derive(Debug, Clone)]
pub struct AttentionScores {
    /// `sigmoid(logits)`, the confidences `s_tij`.
    pub scores: Array3<f64>,
    pub logits: Array3<f64>,
}

/// Offsets defining which positions count as neighbors in the TV loss.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub offsets: Vec<(i64, i64, i64)>,
}

impl Neighborhood {
    /// Full 3x3x3 cube minus the center: 26 offsets.
    pub fn cube26() -> Self {
        let mut offsets = Vec::with_capacity(26);
        for dt in -1..=1i64 {
            for di in -1..=1i64 {
                for dj in -1..=1i64 {
                    if (dt, di, dj) != (0, 0, 0) {
                        offsets.push((dt, di, dj));
                    }
                }
            }
        }
        Neighborhood { offsets }
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.contains(&(0, 0, 0)) {
            return Err(Error::Config("neighborhood contains the origin".into()));
        }
        for &(dt, di, dj) in &self.offsets {
            if !self.offsets.contains(&(-dt, -di, -dj)) {
                return Err(Error::Config(format!(
                    "neighborhood not symmetric: ({dt},{di},{dj}) lacks its negation"
                )));
            }
        }
        Ok(())
    }
}

/// How Gumbel-sigmoid normalization behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GumbelMode {
    /// Draw one mask per call (training behaviour).
    Sample,
    /// Use the expected value `sigmoid(logits)`.
    Expected,
}

#[derive(Debug, Clone)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub mode: GumbelMode,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig { temperature: 1.0, mode: GumbelMode::Sample }
    }
}

/// `sigmoid((logits + g1 - g2) / tau)` with i.i.d. standard Gumbel draws,
/// or `sigmoid(logits)` when sampling is off. Sampling only happens when
/// both `training` and `cfg.mode == Sample` hold.
pub fn gumbel_sigmoid<D: Dimension>(
    logits: &Array<f64, D>,
    cfg: &GumbelConfig,
    training: bool,
    rng: &mut Rng,
) -> Array<f64, D> {
    assert!(cfg.temperature > 0.0, "temperature must be positive");
    if training && cfg.mode == GumbelMode::Sample {
        let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
        logits.mapv(|l| {
            let g1: f64 = gumbel.sample(rng);
            let g2: f64 = gumbel.sample(rng);
            sigmoid((l + g1 - g2) / cfg.temperature)
        })
    } else {
        logits.mapv(sigmoid)
    }
}

/// Hard total-variation loss: mean over positions of
/// `|s_tij - I(mean of in-bounds neighbor scores > 0.5)|`.
pub fn hard_tv_loss(scores: &Array3<f64>, nbhd: &Neighborhood) -> Result<f64> {
    hard_tv_loss_grad(scores, nbhd).map(|(l, _)| l)
}

/// Loss plus its gradient w.r.t. the scores. The indicator target is a
/// constant: the gradient is `sign(s - target) / (T*M*N)` elementwise.
pub fn hard_tv_loss_grad(scores: &Array3<f64>, nbhd: &Neighborhood) -> Result<(f64, Array3<f64>)> {
    let (t, m, n) = scores.dim();
    let total = (t * m * n) as f64;
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros((t, m, n));
    for ti in 0..t {
        for mi in 0..m {
            for ni in 0..n {
                let mut sum = 0.0;
                let mut cnt = 0usize;
                for &(dt, di, dj) in &nbhd.offsets {
                    let tt = ti as i64 + dt;
                    let ii = mi as i64 + di;
                    let jj = ni as i64 + dj;
                    if tt < 0 || ii < 0 || jj < 0 {
                        continue;
                    }
                    let (tt, ii, jj) = (tt as usize, ii as usize, jj as usize);
                    if tt >= t || ii >= m || jj >= n {
                        continue;
                    }
                    sum += scores[[tt, ii, jj]];
                    cnt += 1;
                }
                if cnt == 0 {
                    return Err(Error::Degenerate(format!(
                        "no in-bounds neighbors at ({ti},{mi},{ni}) on a {t}x{m}x{n} map"
                    )));
                }
                let target = if sum / cnt as f64 > 0.5 { 1.0 } else { 0.0 };
                let diff = scores[[ti, mi, ni]] - target;
                loss += diff.abs();
                grad[[ti, mi, ni]] = diff.signum_or_zero() / total;
            }
        }
    }
    Ok((loss / total, grad))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

/// Residual attention block inserted between backbone bottlenecks.
///
/// Branch layout (per stream): depth-wise conv -> BN -> H-Swish -> 1x1x1
/// conv to one channel. The depth-wise convs use replicate padding so a
/// spatially/temporally constant input yields a constant score map.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub sp_dw: DepthwiseConv3d,
    pub sp_bn: BatchNorm,
    sp_act: Activation,
    pub sp_proj: Conv3d,
    pub t_dw: DepthwiseConv3d,
    pub t_bn: BatchNorm,
    t_act: Activation,
    pub t_proj: Conv3d,
    pub gumbel: GumbelConfig,
    cache: Option<AttnCache>,
}

#[derive(Debug, Clone)]
struct AttnCache {
    x: Array5<f64>,
    mask: Array4<f64>,
    scores: Array4<f64>,
}

impl AttentionBlock {
    pub fn new(channels: usize, spatial_kernel: usize, temporal_kernel: usize, rng: &mut Rng) -> Self {
        let sp = spatial_kernel;
        let tk = temporal_kernel;
        AttentionBlock {
            sp_dw: DepthwiseConv3d::new(channels, (1, sp, sp), 1, (0, sp / 2, sp / 2), PadMode::Replicate, rng),
            sp_bn: BatchNorm::new(channels),
            sp_act: Activation::new(ActKind::HSwish),
            sp_proj: Conv3d::new(channels, 1, (1, 1, 1), (1, 1, 1), (0, 0, 0), true, rng),
            t_dw: DepthwiseConv3d::new(channels, (tk, 1, 1), 1, (tk / 2, 0, 0), PadMode::Replicate, rng),
            t_bn: BatchNorm::new(channels),
            t_act: Activation::new(ActKind::HSwish),
            t_proj: Conv3d::new(channels, 1, (1, 1, 1), (1, 1, 1), (0, 0, 0), true, rng),
            gumbel: GumbelConfig::default(),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.sp_dw.channels()
    }

    /// Score logits for a batch, shape `(N, T, M, N)`.
    pub fn logits(&self, x: &Array5<f64>) -> Result<Array4<f64>> {
        let sp = self.sp_proj.infer(&self.sp_act.infer(&self.sp_bn.infer(&self.sp_dw.infer(x)?)))?;
        let pooled = spatial_mean(x);
        let tm = self.t_proj.infer(&self.t_act.infer(&self.t_bn.infer(&self.t_dw.infer(&pooled)?)))?;
        Ok(combine_logits(&sp, &tm))
    }

    pub fn infer(&self, x: &Array5<f64>) -> Result<Array5<f64>> {
        let logits = self.logits(x)?;
        let mask = logits.mapv(sigmoid);
        Ok(apply_mask(x, &mask))
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>, rng: &mut Rng) -> Result<Array5<f64>> {
        let sp = self
            .sp_proj
            .train_fwd(&self.sp_act.train_fwd(&self.sp_bn.train_fwd(&self.sp_dw.train_fwd(x)?)))?;
        let pooled = spatial_mean(x);
        let tm = self
            .t_proj
            .train_fwd(&self.t_act.train_fwd(&self.t_bn.train_fwd(&self.t_dw.train_fwd(&pooled)?)))?;
        let logits = combine_logits(&sp, &tm);
        let scores = logits.mapv(sigmoid);
        let mask = gumbel_sigmoid(&logits, &self.gumbel, true, rng);
        let y = apply_mask(x, &mask);
        self.cache = Some(AttnCache { x: x.clone(), mask: mask.clone(), scores });
        Ok(y)
    }

    /// Deterministic scores from the latest `train_fwd`, shape `(N, T, M, N)`.
    pub fn scores(&self) -> Option<&Array4<f64>> {
        self.cache.as_ref().map(|c| &c.scores)
    }

    /// Backward pass. `dscores` carries the TV-loss gradient w.r.t. the
    /// deterministic scores (None when the auxiliary loss is off).
    pub fn backward(&mut self, dy: &Array5<f64>, dscores: Option<&Array4<f64>>) -> Array5<f64> {
        let AttnCache { x, mask, scores } = self.cache.take().expect("backward without train_fwd");
        let (n, c, t, h, w) = x.dim();
        let tau = self.gumbel.temperature;

        // y = x * (1 + mask) broadcast over channels.
        let mut dx = dy.clone();
        let mut dmask = Array4::<f64>::zeros((n, t, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let mut dx_lane = dx.slice_mut(s![ni, ci, .., .., ..]);
                let dy_lane = dy.slice(s![ni, ci, .., .., ..]);
                let x_lane = x.slice(s![ni, ci, .., .., ..]);
                let m_lane = mask.slice(s![ni, .., .., ..]);
                dx_lane.zip_mut_with(&m_lane, |d, &mv| *d *= 1.0 + mv);
                let mut dm = dmask.slice_mut(s![ni, .., .., ..]);
                ndarray::Zip::from(&mut dm)
                    .and(&dy_lane)
                    .and(&x_lane)
                    .for_each(|d, &g, &xv| *d += g * xv);
            }
        }

        // Through sampling: dmask/dlogit = m(1-m)/tau. Through the TV-loss
        // scores: dscore/dlogit = s(1-s).
        let mut dlogits = dmask;
        dlogits.zip_mut_with(&mask, |d, &mv| *d *= mv * (1.0 - mv) / tau);
        if let Some(ds) = dscores {
            ndarray::Zip::from(&mut dlogits)
                .and(ds)
                .and(&scores)
                .for_each(|d, &g, &sv| *d += g * sv * (1.0 - sv));
        }

        // Spatial branch sees the full logit grad, the temporal branch its
        // spatial sum (broadcast adjoint).
        let dl5 = dlogits
            .clone()
            .into_shape_with_order((n, 1, t, h, w))
            .expect("contiguous logits grad");
        let d_sp = self.sp_dw.backward(&self.sp_bn.backward(&self.sp_act.backward(&self.sp_proj.backward(&dl5))));

        let mut dt5 = Array5::<f64>::zeros((n, 1, t, 1, 1));
        for ni in 0..n {
            for ti in 0..t {
                dt5[[ni, 0, ti, 0, 0]] = dlogits.slice(s![ni, ti, .., ..]).sum();
            }
        }
        let d_pool = self.t_dw.backward(&self.t_bn.backward(&self.t_act.backward(&self.t_proj.backward(&dt5))));

        // Undo the two pooling/broadcast steps back onto x.
        let inv_hw = 1.0 / (h * w) as f64;
        for ni in 0..n {
            for ci in 0..c {
                for ti in 0..t {
                    let g = d_pool[[ni, ci, ti, 0, 0]] * inv_hw;
                    dx.slice_mut(s![ni, ci, ti, .., ..]).mapv_inplace(|v| v + g);
                }
            }
        }
        dx += &d_sp;
        dx
    }

    /// Parameters and MACs for one forward at the given input shape.
    pub fn stats(&self, in_shape: (usize, usize, usize, usize)) -> Result<(u64, u64)> {
        let (c, t, h, w) = in_shape;
        let (p1, m1, _) = self.sp_dw.stats(in_shape)?;
        let (p2, m2, _) = self.sp_proj.stats(in_shape)?;
        let (p3, m3, _) = self.t_dw.stats((c, t, 1, 1))?;
        let (p4, m4, _) = self.t_proj.stats((c, t, 1, 1))?;
        let bn_params = self.sp_bn.param_count() + self.t_bn.param_count();
        let _ = (h, w);
        Ok((p1 + p2 + p3 + p4 + bn_params, m1 + m2 + m3 + m4))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.sp_dw.visit_params(&format!("{prefix}.sp_dw"), f);
        self.sp_bn.visit_params(&format!("{prefix}.sp_bn"), f);
        self.sp_proj.visit_params(&format!("{prefix}.sp_proj"), f);
        self.t_dw.visit_params(&format!("{prefix}.t_dw"), f);
        self.t_bn.visit_params(&format!("{prefix}.t_bn"), f);
        self.t_proj.visit_params(&format!("{prefix}.t_proj"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor) {
        self.sp_bn.visit_buffers(&format!("{prefix}.sp_bn"), f);
        self.t_bn.visit_buffers(&format!("{prefix}.t_bn"), f);
    }
}

fn combine_logits(sp: &Array5<f64>, tm: &Array5<f64>) -> Array4<f64> {
    let (n, _, t, h, w) = sp.dim();
    let mut logits = Array4::<f64>::zeros((n, t, h, w));
    for ni in 0..n {
        for ti in 0..t {
            let bias = tm[[ni, 0, ti, 0, 0]];
            let src = sp.slice(s![ni, 0, ti, .., ..]);
            let mut dst = logits.slice_mut(s![ni, ti, .., ..]);
            ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &v| *d = v + bias);
        }
    }
    logits
}

fn apply_mask(x: &Array5<f64>, mask: &Array4<f64>) -> Array5<f64> {
    let (n, c, _, _, _) = x.dim();
    let mut y = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let mut lane = y.slice_mut(s![ni, ci, .., .., ..]);
            let m = mask.slice(s![ni, .., .., ..]);
            lane.zip_mut_with(&m, |v, &mv| *v *= 1.0 + mv);
        }
    }
    y
}

/// Writes a score map as `[T, M, N]` little-endian u32 header followed by
/// row-major little-endian f32 values.
pub fn write_mask_dump(path: &Path, scores: &Array3<f64>) -> Result<()> {
    let (t, m, n) = scores.dim();
    let mut file = std::fs::File::create(path)?;
    let mut buf = Vec::with_capacity(12 + scores.len() * 4);
    for dim in [t, m, n] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in scores.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_mask_dump(path: &Path) -> Result<Array3<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::Data(format!("mask dump too short: {} bytes", bytes.len())));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    }
    let count = dims[0] * dims[1] * dims[2];
    if bytes.len() != 12 + count * 4 {
        return Err(Error::Data(format!(
            "mask dump length {} does not match header {:?}",
            bytes.len(),
            dims
        )));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let off = 12 + i * 4;
        values.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), values)
        .map_err(|e| Error::Data(format!("mask dump reshape: {e}")))
}
