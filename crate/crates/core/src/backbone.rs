//! S3D MobileNet-V3 feature extractor assembled from a declarative layer
//! table.
//!
//! Convolutions are separable in space and time: bottlenecks expand with a
//! pointwise conv, filter with a depth-wise spatial conv, and project with a
//! `t x 1 x 1` conv (symmetric temporal zero padding). Temporal
//! downsampling never uses strided kernels — rows with temporal stride 2
//! get a trailing 2/2 average pool instead. Squeeze-excite gates pool over
//! space only, so each frame is gated independently.

use ndarray::{Array4, Array5};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionBlock;
use crate::nn::pool::spatial_mean;
use crate::nn::{
    hard_sigmoid, hard_sigmoid_grad, ActKind, Activation, BatchNorm, BufferVisitor, ContinuousDropout,
    Conv3d, DepthwiseConv3d, PadMode, ParamVisitor, Rng, TemporalAvgPool,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Conv3d,
    Bneck,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Nonlinearity {
    /// ReLU
    Re,
    /// H-Swish
    Hs,
}

impl Nonlinearity {
    fn act_kind(self) -> ActKind {
        match self {
            Nonlinearity::Re => ActKind::Relu,
            Nonlinearity::Hs => ActKind::HSwish,
        }
    }
}

fn one() -> usize {
    1
}

/// One row of the layer table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub op_kind: OpKind,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expand_size: Option<usize>,
    pub out_channels: usize,
    #[serde(default)]
    pub use_se: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonlinearity: Option<Nonlinearity>,
    #[serde(default = "one")]
    pub spatial_stride: usize,
    #[serde(default = "one")]
    pub temporal_stride: usize,
    #[serde(default)]
    pub use_dropout: bool,
}

impl LayerSpec {
    fn conv(sk: usize, tk: usize, out: usize, nl: Nonlinearity, ss: usize, ts: usize) -> Self {
        LayerSpec {
            op_kind: OpKind::Conv3d,
            spatial_kernel: sk,
            temporal_kernel: tk,
            expand_size: None,
            out_channels: out,
            use_se: false,
            nonlinearity: Some(nl),
            spatial_stride: ss,
            temporal_stride: ts,
            use_dropout: false,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bneck(sk: usize, tk: usize, exp: usize, out: usize, se: bool, nl: Nonlinearity, ss: usize, ts: usize) -> Self {
        LayerSpec {
            op_kind: OpKind::Bneck,
            spatial_kernel: sk,
            temporal_kernel: tk,
            expand_size: Some(exp),
            out_channels: out,
            use_se: se,
            nonlinearity: Some(nl),
            spatial_stride: ss,
            temporal_stride: ts,
            use_dropout: true,
        }
    }

    fn attention(sk: usize, tk: usize, out: usize) -> Self {
        LayerSpec {
            op_kind: OpKind::Attention,
            spatial_kernel: sk,
            temporal_kernel: tk,
            expand_size: None,
            out_channels: out,
            use_se: false,
            nonlinearity: None,
            spatial_stride: 1,
            temporal_stride: 1,
            use_dropout: false,
        }
    }
}

/// Full backbone description; the default reproduces the large S3D
/// MobileNet-V3 table row-for-row (stem, 15 bottlenecks, 2 attention
/// insertion points, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default = "BackboneConfig::default_input_spatial")]
    pub input_spatial: usize,
    #[serde(default = "BackboneConfig::default_input_temporal")]
    pub input_temporal: usize,
    #[serde(default = "BackboneConfig::default_width_multiplier")]
    pub width_multiplier: f64,
    pub layers: Vec<LayerSpec>,
}

impl BackboneConfig {
    fn default_input_spatial() -> usize {
        224
    }

    fn default_input_temporal() -> usize {
        16
    }

    fn default_width_multiplier() -> f64 {
        1.0
    }

    /// The large-variant layer table.
    pub fn table_default() -> Self {
        use Nonlinearity::{Hs, Re};
        let layers = vec![
            LayerSpec::conv(3, 1, 16, Hs, 2, 1),
            LayerSpec::bneck(3, 5, 16, 16, false, Re, 1, 1),
            LayerSpec::bneck(3, 3, 64, 24, false, Re, 2, 2),
            LayerSpec::bneck(3, 3, 72, 24, false, Re, 1, 1),
            LayerSpec::bneck(5, 3, 72, 40, true, Re, 2, 1),
            LayerSpec::bneck(5, 3, 120, 40, true, Re, 1, 1),
            LayerSpec::bneck(5, 5, 120, 40, true, Re, 1, 1),
            LayerSpec::bneck(3, 5, 240, 80, false, Hs, 2, 1),
            LayerSpec::bneck(3, 3, 200, 80, false, Hs, 1, 1),
            LayerSpec::bneck(3, 3, 184, 80, false, Hs, 1, 1),
            LayerSpec::bneck(3, 5, 184, 80, false, Hs, 1, 1),
            LayerSpec::attention(3, 3, 80),
            LayerSpec::bneck(3, 3, 480, 112, true, Hs, 1, 2),
            LayerSpec::bneck(3, 3, 672, 112, true, Hs, 1, 1),
            LayerSpec::bneck(5, 3, 672, 160, true, Hs, 2, 1),
            LayerSpec::attention(3, 3, 160),
            LayerSpec::bneck(5, 3, 960, 160, true, Hs, 1, 1),
            LayerSpec::bneck(5, 3, 960, 160, true, Hs, 1, 1),
            LayerSpec::conv(1, 1, 960, Hs, 1, 1),
        ];
        BackboneConfig {
            input_spatial: 224,
            input_temporal: 16,
            width_multiplier: 1.0,
            layers,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: BackboneConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("backbone config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Channel scaling: multiply, round to the nearest multiple of 8,
    /// floor at 8. Identity at multiplier 1.0 for the default table.
    pub fn scale_channels(&self, c: usize) -> usize {
        let scaled = (c as f64 * self.width_multiplier / 8.0).round() as usize * 8;
        scaled.max(8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("layer table is empty".into()));
        }
        if !(self.width_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        let mut prev_out: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            let ctx = format!("layer {i} ({:?})", l.op_kind);
            for (what, k) in [("spatial", l.spatial_kernel), ("temporal", l.temporal_kernel)] {
                if k == 0 || k % 2 == 0 {
                    return Err(Error::Config(format!("{ctx}: {what} kernel {k} must be odd and >= 1")));
                }
            }
            if !matches!(l.spatial_stride, 1 | 2) || !matches!(l.temporal_stride, 1 | 2) {
                return Err(Error::Config(format!(
                    "{ctx}: strides must be 1 or 2, got spatial {} temporal {}",
                    l.spatial_stride, l.temporal_stride
                )));
            }
            match l.op_kind {
                OpKind::Bneck => {
                    if l.expand_size.is_none() {
                        return Err(Error::Config(format!("{ctx}: bneck requires expand_size")));
                    }
                    if l.nonlinearity.is_none() {
                        return Err(Error::Config(format!("{ctx}: bneck requires a nonlinearity")));
                    }
                }
                OpKind::Conv3d => {
                    if l.expand_size.is_some() {
                        return Err(Error::Config(format!("{ctx}: conv3d must not set expand_size")));
                    }
                    if l.nonlinearity.is_none() {
                        return Err(Error::Config(format!("{ctx}: conv3d requires a nonlinearity")));
                    }
                }
                OpKind::Attention => {
                    if l.expand_size.is_some() || l.use_se || l.use_dropout || l.nonlinearity.is_some() {
                        return Err(Error::Config(format!(
                            "{ctx}: attention rows only take kernels and out_channels"
                        )));
                    }
                    if l.spatial_stride != 1 || l.temporal_stride != 1 {
                        return Err(Error::Config(format!("{ctx}: attention rows must keep stride 1")));
                    }
                    match prev_out {
                        Some(c) if c == l.out_channels => {}
                        Some(c) => {
                            return Err(Error::Config(format!(
                                "{ctx}: out_channels {} must match preceding row's {c}",
                                l.out_channels
                            )))
                        }
                        None => return Err(Error::Config(format!("{ctx}: attention cannot be the first row"))),
                    }
                }
            }
            prev_out = Some(l.out_channels);
        }
        Ok(())
    }
}

/// Per-frame squeeze-excite: spatial-only squeeze to `(C, T, 1, 1)`, two
/// pointwise layers (ReLU, then hard-sigmoid), gate broadcast over space.
#[derive(Debug, Clone)]
pub struct SeGate {
    pub fc1: Conv3d,
    pub fc2: Conv3d,
    cache: Option<SeCache>,
}

#[derive(Debug, Clone)]
struct SeCache {
    x: Array5<f64>,
    pre1: Array5<f64>,
    pre2: Array5<f64>,
    gate: Array5<f64>,
}

/// Squeeze-channel rule: a quarter of the input, rounded to a multiple
/// of 8, floored at 8.
pub fn se_reduced_channels(channels: usize) -> usize {
    (((channels / 4) as f64 / 8.0).round() as usize * 8).max(8)
}

impl SeGate {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        let reduced = se_reduced_channels(channels);
        SeGate {
            fc1: Conv3d::new(channels, reduced, (1, 1, 1), (1, 1, 1), (0, 0, 0), true, rng),
            fc2: Conv3d::new(reduced, channels, (1, 1, 1), (1, 1, 1), (0, 0, 0), true, rng),
            cache: None,
        }
    }

    /// The squeeze vector: per-(channel, frame) spatial means.
    pub fn squeeze(x: &Array5<f64>) -> Array5<f64> {
        spatial_mean(x)
    }

    fn gate_from(&self, squeezed: &Array5<f64>) -> Result<Array5<f64>> {
        let pre1 = self.fc1.infer(squeezed)?;
        let pre2 = self.fc2.infer(&pre1.mapv(|v| v.max(0.0)))?;
        Ok(pre2.mapv(hard_sigmoid))
    }

    pub fn infer(&self, x: &Array5<f64>) -> Result<Array5<f64>> {
        let gate = self.gate_from(&Self::squeeze(x))?;
        Ok(broadcast_mul(x, &gate))
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>) -> Result<Array5<f64>> {
        let squeezed = Self::squeeze(x);
        let pre1 = self.fc1.train_fwd(&squeezed)?;
        let pre2 = self.fc2.train_fwd(&pre1.mapv(|v| v.max(0.0)))?;
        let gate = pre2.mapv(hard_sigmoid);
        let y = broadcast_mul(x, &gate);
        self.cache = Some(SeCache { x: x.clone(), pre1, pre2, gate });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let SeCache { x, pre1, pre2, gate } = self.cache.take().expect("backward without train_fwd");
        let (n, c, t, h, w) = x.dim();

        // y = x * gate (gate broadcast over H, W)
        let mut dx = dy.clone();
        let mut dgate = Array5::<f64>::zeros((n, c, t, 1, 1));
        for ni in 0..n {
            for ci in 0..c {
                for ti in 0..t {
                    let g = gate[[ni, ci, ti, 0, 0]];
                    let mut dx_lane = dx.slice_mut(ndarray::s![ni, ci, ti, .., ..]);
                    dx_lane.mapv_inplace(|v| v * g);
                    let dy_lane = dy.slice(ndarray::s![ni, ci, ti, .., ..]);
                    let x_lane = x.slice(ndarray::s![ni, ci, ti, .., ..]);
                    dgate[[ni, ci, ti, 0, 0]] = dy_lane
                        .iter()
                        .zip(x_lane.iter())
                        .fold(0.0, |acc, (&g2, &xv)| acc + g2 * xv);
                }
            }
        }

        let mut dpre2 = dgate;
        dpre2.zip_mut_with(&pre2, |d, &p| *d *= hard_sigmoid_grad(p));
        let mut dact1 = self.fc2.backward(&dpre2);
        dact1.zip_mut_with(&pre1, |d, &p| if p <= 0.0 { *d = 0.0 });
        let dsq = self.fc1.backward(&dact1);

        let inv_hw = 1.0 / (h * w) as f64;
        for ni in 0..n {
            for ci in 0..c {
                for ti in 0..t {
                    let g = dsq[[ni, ci, ti, 0, 0]] * inv_hw;
                    dx.slice_mut(ndarray::s![ni, ci, ti, .., ..]).mapv_inplace(|v| v + g);
                }
            }
        }
        dx
    }

    pub fn stats(&self, channels: usize, t: usize) -> Result<(u64, u64)> {
        let (p1, m1, _) = self.fc1.stats((channels, t, 1, 1))?;
        let (p2, m2, _) = self.fc2.stats((se_reduced_channels(channels), t, 1, 1))?;
        Ok((p1 + p2, m1 + m2))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.fc1.visit_params(&format!("{prefix}.fc1"), f);
        self.fc2.visit_params(&format!("{prefix}.fc2"), f);
    }
}

fn broadcast_mul(x: &Array5<f64>, gate: &Array5<f64>) -> Array5<f64> {
    let (n, c, t, _, _) = x.dim();
    let mut y = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                let g = gate[[ni, ci, ti, 0, 0]];
                y.slice_mut(ndarray::s![ni, ci, ti, .., ..]).mapv_inplace(|v| v * g);
            }
        }
    }
    y
}

/// Plain conv + BN + activation row (stem and head), with an optional
/// trailing temporal pool.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv3d,
    pub bn: BatchNorm,
    act: Activation,
    pub pool: Option<TemporalAvgPool>,
}

impl ConvBnAct {
    fn from_spec(in_ch: usize, out_ch: usize, spec: &LayerSpec, rng: &mut Rng) -> Self {
        let sk = spec.spatial_kernel;
        let tk = spec.temporal_kernel;
        let conv = Conv3d::new(
            in_ch,
            out_ch,
            (tk, sk, sk),
            (1, spec.spatial_stride, spec.spatial_stride),
            (tk / 2, sk / 2, sk / 2),
            false,
            rng,
        );
        let pool = (spec.temporal_stride == 2).then(|| TemporalAvgPool::new(2, 2));
        ConvBnAct {
            conv,
            bn: BatchNorm::new(out_ch),
            act: Activation::new(spec.nonlinearity.expect("validated").act_kind()),
            pool,
        }
    }

    pub fn infer(&self, x: &Array5<f64>) -> Result<Array5<f64>> {
        let y = self.act.infer(&self.bn.infer(&self.conv.infer(x)?));
        Ok(match &self.pool {
            Some(p) => p.infer(&y),
            None => y,
        })
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>) -> Result<Array5<f64>> {
        let y = self.act.train_fwd(&self.bn.train_fwd(&self.conv.train_fwd(x)?));
        Ok(match &mut self.pool {
            Some(p) => p.train_fwd(&y),
            None => y,
        })
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let g = match &mut self.pool {
            Some(p) => p.backward(dy),
            None => dy.clone(),
        };
        self.conv.backward(&self.bn.backward(&self.act.backward(&g)))
    }

    fn stats(&self, in_shape: (usize, usize, usize, usize)) -> Result<(u64, u64, (usize, usize, usize, usize))> {
        let (p, m, mut out) = self.conv.stats(in_shape)?;
        if let Some(pool) = &self.pool {
            out.1 = pool.out_t(out.1);
        }
        Ok((p + self.bn.param_count(), m, out))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }
}

/// Separable inverted-residual bottleneck:
/// `1x1x1 expand -> depth-wise 1xkxk (spatial stride) -> t x 1x1 project`,
/// with optional per-frame SE after the depth-wise stage, continuous
/// dropout after the projection, a residual skip when shapes allow it, and
/// a trailing temporal pool when the row asks for temporal stride 2.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub expand: Conv3d,
    pub expand_bn: BatchNorm,
    expand_act: Activation,
    pub dw: DepthwiseConv3d,
    pub dw_bn: BatchNorm,
    dw_act: Activation,
    pub se: Option<SeGate>,
    pub project: Conv3d,
    pub project_bn: BatchNorm,
    pub dropout: ContinuousDropout,
    pub pool: Option<TemporalAvgPool>,
    pub residual: bool,
}

impl Bottleneck {
    fn from_spec(in_ch: usize, exp: usize, out_ch: usize, spec: &LayerSpec, dropout_rate: f64, rng: &mut Rng) -> Self {
        let sk = spec.spatial_kernel;
        let tk = spec.temporal_kernel;
        let act_kind = spec.nonlinearity.expect("validated").act_kind();
        let residual = in_ch == out_ch && spec.spatial_stride == 1 && spec.temporal_stride == 1;
        Bottleneck {
            expand: Conv3d::new(in_ch, exp, (1, 1, 1), (1, 1, 1), (0, 0, 0), false, rng),
            expand_bn: BatchNorm::new(exp),
            expand_act: Activation::new(act_kind),
            dw: DepthwiseConv3d::new(exp, (1, sk, sk), spec.spatial_stride, (0, sk / 2, sk / 2), PadMode::Zeros, rng),
            dw_bn: BatchNorm::new(exp),
            dw_act: Activation::new(act_kind),
            se: spec.use_se.then(|| SeGate::new(exp, rng)),
            project: Conv3d::new(exp, out_ch, (tk, 1, 1), (1, 1, 1), (tk / 2, 0, 0), false, rng),
            project_bn: BatchNorm::new(out_ch),
            dropout: ContinuousDropout::new(if spec.use_dropout { dropout_rate } else { 0.0 }),
            pool: (spec.temporal_stride == 2).then(|| TemporalAvgPool::new(2, 2)),
            residual,
        }
    }

    pub fn infer(&self, x: &Array5<f64>) -> Result<Array5<f64>> {
        let e = self.expand_act.infer(&self.expand_bn.infer(&self.expand.infer(x)?));
        let mut d = self.dw_act.infer(&self.dw_bn.infer(&self.dw.infer(&e)?));
        if let Some(se) = &self.se {
            d = se.infer(&d)?;
        }
        let mut p = self.project_bn.infer(&self.project.infer(&d)?);
        if self.residual {
            p += x;
        }
        Ok(match &self.pool {
            Some(pool) => pool.infer(&p),
            None => p,
        })
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>, rng: &mut Rng) -> Result<Array5<f64>> {
        let e = self
            .expand_act
            .train_fwd(&self.expand_bn.train_fwd(&self.expand.train_fwd(x)?));
        let mut d = self.dw_act.train_fwd(&self.dw_bn.train_fwd(&self.dw.train_fwd(&e)?));
        if let Some(se) = &mut self.se {
            d = se.train_fwd(&d)?;
        }
        let mut p = self.project_bn.train_fwd(&self.project.train_fwd(&d)?);
        p = self.dropout.train_fwd(&p, rng);
        if self.residual {
            p += x;
        }
        Ok(match &mut self.pool {
            Some(pool) => pool.train_fwd(&p),
            None => p,
        })
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let g = match &mut self.pool {
            Some(pool) => pool.backward(dy),
            None => dy.clone(),
        };
        let mut d = self.dropout.backward(&g);
        d = self.project.backward(&self.project_bn.backward(&d));
        if let Some(se) = &mut self.se {
            d = se.backward(&d);
        }
        d = self.dw.backward(&self.dw_bn.backward(&self.dw_act.backward(&d)));
        let mut dx = self
            .expand
            .backward(&self.expand_bn.backward(&self.expand_act.backward(&d)));
        if self.residual {
            dx += &g;
        }
        dx
    }

    fn stats(&self, in_shape: (usize, usize, usize, usize)) -> Result<(u64, u64, (usize, usize, usize, usize))> {
        let (mut params, mut macs, shape) = self.expand.stats(in_shape)?;
        params += self.expand_bn.param_count();
        let (p, m, shape) = self.dw.stats(shape)?;
        params += p + self.dw_bn.param_count();
        macs += m;
        if let Some(se) = &self.se {
            let (p, m) = se.stats(shape.0, shape.1)?;
            params += p;
            macs += m;
        }
        let (p, m, mut shape) = self.project.stats(shape)?;
        params += p + self.project_bn.param_count();
        macs += m;
        if let Some(pool) = &self.pool {
            shape.1 = pool.out_t(shape.1);
        }
        Ok((params, macs, shape))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.expand.visit_params(&format!("{prefix}.expand"), f);
        self.expand_bn.visit_params(&format!("{prefix}.expand_bn"), f);
        self.dw.visit_params(&format!("{prefix}.dw"), f);
        self.dw_bn.visit_params(&format!("{prefix}.dw_bn"), f);
        if let Some(se) = &mut self.se {
            se.visit_params(&format!("{prefix}.se"), f);
        }
        self.project.visit_params(&format!("{prefix}.project"), f);
        self.project_bn.visit_params(&format!("{prefix}.project_bn"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor) {
        self.expand_bn.visit_buffers(&format!("{prefix}.expand_bn"), f);
        self.dw_bn.visit_buffers(&format!("{prefix}.dw_bn"), f);
        self.project_bn.visit_buffers(&format!("{prefix}.project_bn"), f);
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Conv(ConvBnAct),
    Bneck(Box<Bottleneck>),
    Attention(Box<AttentionBlock>),
}

/// Parameter and forward-cost summary. `flops` counts conv
/// multiply-accumulates twice; normalization, activations and pooling are
/// ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: u64,
    pub flops: u64,
}

/// One row of a shape trace: block label and its output `(C, T, H, W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub label: String,
    pub out: (usize, usize, usize, usize),
}

/// Default per-bottleneck continuous-dropout rate for rows with the
/// dropout flag set.
pub const DEFAULT_DROPOUT_RATE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct BackboneModel {
    pub config: BackboneConfig,
    pub blocks: Vec<Block>,
}

impl BackboneModel {
    pub fn build(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        Self::build_with_dropout(config, DEFAULT_DROPOUT_RATE, rng)
    }

    pub fn build_with_dropout(config: BackboneConfig, dropout_rate: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.layers.len());
        let mut channels = 3usize;
        for spec in &config.layers {
            let out_ch = config.scale_channels(spec.out_channels);
            match spec.op_kind {
                OpKind::Conv3d => {
                    blocks.push(Block::Conv(ConvBnAct::from_spec(channels, out_ch, spec, rng)));
                    channels = out_ch;
                }
                OpKind::Bneck => {
                    let exp = config.scale_channels(spec.expand_size.expect("validated"));
                    blocks.push(Block::Bneck(Box::new(Bottleneck::from_spec(
                        channels,
                        exp,
                        out_ch,
                        spec,
                        dropout_rate,
                        rng,
                    ))));
                    channels = out_ch;
                }
                OpKind::Attention => {
                    blocks.push(Block::Attention(Box::new(AttentionBlock::new(
                        channels,
                        spec.spatial_kernel,
                        spec.temporal_kernel,
                        rng,
                    ))));
                }
            }
        }
        Ok(BackboneModel { config, blocks })
    }

    pub fn in_shape(&self) -> (usize, usize, usize, usize) {
        (3, self.config.input_temporal, self.config.input_spatial, self.config.input_spatial)
    }

    fn check_input(&self, x: &Array5<f64>) -> Result<()> {
        let (_, c, t, h, w) = x.dim();
        let expect = self.in_shape();
        if (c, t, h, w) != expect {
            return Err(Error::shape("backbone input", expect, (c, t, h, w)));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Array5<f64>) -> Result<Array5<f64>> {
        self.check_input(x)?;
        let mut y = x.clone();
        for block in &self.blocks {
            y = match block {
                Block::Conv(b) => b.infer(&y)?,
                Block::Bneck(b) => b.infer(&y)?,
                Block::Attention(b) => b.infer(&y)?,
            };
        }
        Ok(y)
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>, rng: &mut Rng) -> Result<Array5<f64>> {
        self.check_input(x)?;
        let mut y = x.clone();
        for block in &mut self.blocks {
            y = match block {
                Block::Conv(b) => b.train_fwd(&y)?,
                Block::Bneck(b) => b.train_fwd(&y, rng)?,
                Block::Attention(b) => b.train_fwd(&y, rng)?,
            };
        }
        Ok(y)
    }

    /// Deterministic attention scores cached by the latest `train_fwd`,
    /// one `(N, T, M, N)` map per attention block in network order.
    pub fn attention_scores(&self) -> Vec<&Array4<f64>> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Attention(a) => a.scores(),
                _ => None,
            })
            .collect()
    }

    pub fn attention_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| matches!(b, Block::Attention(_)))
            .count()
    }

    /// Backward pass. `dscores` holds the TV-loss gradients per attention
    /// block in network order; pass an empty slice to skip them.
    pub fn backward(&mut self, dy: &Array5<f64>, dscores: &[Array4<f64>]) -> Array5<f64> {
        assert!(
            dscores.is_empty() || dscores.len() == self.attention_count(),
            "expected {} TV gradients, got {}",
            self.attention_count(),
            dscores.len()
        );
        let mut attn_left = dscores.len();
        let mut g = dy.clone();
        for block in self.blocks.iter_mut().rev() {
            g = match block {
                Block::Conv(b) => b.backward(&g),
                Block::Bneck(b) => b.backward(&g),
                Block::Attention(b) => {
                    let ds = if attn_left > 0 {
                        attn_left -= 1;
                        Some(&dscores[attn_left])
                    } else {
                        None
                    };
                    b.backward(&g, ds)
                }
            };
        }
        g
    }

    /// Walks the table and reports each block's output shape.
    pub fn shape_trace(&self) -> Result<Vec<TraceRow>> {
        let mut rows = Vec::with_capacity(self.blocks.len());
        let mut shape = self.in_shape();
        for (i, block) in self.blocks.iter().enumerate() {
            let label = match block {
                Block::Conv(_) => format!("{i:02}:conv3d"),
                Block::Bneck(_) => format!("{i:02}:bneck"),
                Block::Attention(_) => format!("{i:02}:attention"),
            };
            shape = match block {
                Block::Conv(b) => b.stats(shape)?.2,
                Block::Bneck(b) => b.stats(shape)?.2,
                Block::Attention(_) => shape,
            };
            rows.push(TraceRow { label, out: shape });
        }
        Ok(rows)
    }

    pub fn out_shape(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.shape_trace()?.last().expect("non-empty table").out)
    }

    /// Trainable parameter count and forward FLOPs at the configured input.
    pub fn model_stats(&self) -> Result<ModelStats> {
        let mut params = 0u64;
        let mut macs = 0u64;
        let mut shape = self.in_shape();
        for block in &self.blocks {
            match block {
                Block::Conv(b) => {
                    let (p, m, s) = b.stats(shape)?;
                    params += p;
                    macs += m;
                    shape = s;
                }
                Block::Bneck(b) => {
                    let (p, m, s) = b.stats(shape)?;
                    params += p;
                    macs += m;
                    shape = s;
                }
                Block::Attention(b) => {
                    let (p, m) = b.stats(shape)?;
                    params += p;
                    macs += m;
                }
            }
        }
        Ok(ModelStats { params, flops: macs * 2 })
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let name = format!("{prefix}.block{i:02}");
            match block {
                Block::Conv(b) => b.visit_params(&name, f),
                Block::Bneck(b) => b.visit_params(&name, f),
                Block::Attention(b) => b.visit_params(&name, f),
            }
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let name = format!("{prefix}.block{i:02}");
            match block {
                Block::Conv(b) => b.visit_buffers(&name, f),
                Block::Bneck(b) => b.visit_buffers(&name, f),
                Block::Attention(b) => b.visit_buffers(&name, f),
            }
        }
    }
}
