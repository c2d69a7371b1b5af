//! Embedding head and metric-learning losses.
//!
//! The head reduces backbone features to a unit-norm 256-d embedding
//! (global average pool, pointwise projection, BN, L2 normalization).
//! Classification happens in cosine space against unit-norm class centers
//! through a PR-Product: the forward value is the plain inner product, but
//! gradients through each cosine are gated by `|sin theta|`, which keeps
//! parameters tunable near convergence (cos ~ 1) without changing values.
//!
//! The objective combines AM-Softmax with a max-entropy clamp
//! `L_AM = [L_cross(p) - alpha * H(p)]+`, a hinge push loss between
//! cross-class embeddings, the same hinge between class centers, and the
//! attention TV terms.

use ndarray::{s, Array1, Array2, Array5, ArrayView1};
use ndarray::linalg::general_mat_mul;

use crate::nn::{BatchNorm, BufferVisitor, GlobalAvgPool, Linear, Param, ParamVisitor, Rng};
use crate::{Error, Result};

/// Embedding dimensionality; fixed regardless of width multiplier.
pub const EMBED_DIM: usize = 256;

/// Scheduled AM-Softmax scale: linear descent, clamped at both ends.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleSchedule {
    pub s_start: f64,
    pub s_end: f64,
    pub duration_epochs: u32,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        ScaleSchedule { s_start: 30.0, s_end: 5.0, duration_epochs: 40 }
    }
}

impl ScaleSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_start > self.s_end && self.s_end > 0.0) {
            return Err(Error::Config(format!(
                "scale schedule requires s_start > s_end > 0, got {} and {}",
                self.s_start, self.s_end
            )));
        }
        if self.duration_epochs == 0 {
            return Err(Error::Config("scale schedule duration must be >= 1 epoch".into()));
        }
        Ok(())
    }

    pub fn scale_at(&self, epoch: u32) -> f64 {
        let slope = (self.s_start - self.s_end) / self.duration_epochs as f64;
        (self.s_start - slope * epoch as f64).clamp(self.s_end, self.s_start)
    }
}

/// AM-Softmax knobs. The margin and entropy weight are not given by the
/// schedule; the scale is.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AmSoftmaxParams {
    pub margin: f64,
    pub scale: f64,
    pub entropy_weight: f64,
}

impl Default for AmSoftmaxParams {
    fn default() -> Self {
        AmSoftmaxParams { margin: 0.35, scale: 30.0, entropy_weight: 0.2 }
    }
}

impl AmSoftmaxParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("AM-Softmax scale must be > 0, got {}", self.scale)));
        }
        if self.margin < 0.0 || self.margin >= 1.0 {
            return Err(Error::Config(format!("AM-Softmax margin must be in [0, 1), got {}", self.margin)));
        }
        if self.entropy_weight < 0.0 {
            return Err(Error::Config(format!("entropy weight must be >= 0, got {}", self.entropy_weight)));
        }
        Ok(())
    }
}

/// Global pool -> pointwise projection -> BN -> L2 normalization.
#[derive(Debug, Clone)]
pub struct EmbedHead {
    pool: GlobalAvgPool,
    pub proj: Linear,
    pub bn: BatchNorm,
    cache_norm: Option<(Array2<f64>, Array1<f64>)>,
}

impl EmbedHead {
    pub fn new(in_channels: usize, rng: &mut Rng) -> Self {
        EmbedHead {
            pool: GlobalAvgPool::new(),
            proj: Linear::new(in_channels, EMBED_DIM, false, rng),
            bn: BatchNorm::new(EMBED_DIM),
            cache_norm: None,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.proj.param_count() + self.bn.param_count()
    }

    fn normalize(pre: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let n = pre.dim().0;
        let mut norms = Array1::<f64>::zeros(n);
        let mut out = pre.clone();
        for i in 0..n {
            let norm = pre.row(i).dot(&pre.row(i)).sqrt();
            if norm < 1e-12 {
                return Err(Error::Degenerate(format!("embedding {i} has zero norm before normalization")));
            }
            norms[i] = norm;
            out.row_mut(i).mapv_inplace(|v| v / norm);
        }
        Ok((out, norms))
    }

    pub fn infer(&self, features: &Array5<f64>) -> Result<Array2<f64>> {
        let pooled = self.pool.infer(features);
        let projected = self.proj.infer(&pooled);
        let pre = bn_vec_infer(&self.bn, &projected);
        Ok(Self::normalize(&pre)?.0)
    }

    pub fn train_fwd(&mut self, features: &Array5<f64>) -> Result<Array2<f64>> {
        let pooled = self.pool.train_fwd(features);
        let projected = self.proj.train_fwd(&pooled);
        let pre = bn_vec_train(&mut self.bn, &projected);
        let (out, norms) = Self::normalize(&pre)?;
        self.cache_norm = Some((out.clone(), norms));
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array5<f64> {
        let (e, norms) = self.cache_norm.take().expect("backward without train_fwd");
        let (n, d) = e.dim();
        // d(u/|u|) = (dy - e (e . dy)) / |u|
        let mut dpre = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let dot = e.row(i).dot(&dy.row(i));
            let ei = e.row(i);
            let gi = dy.row(i);
            let mut out = dpre.row_mut(i);
            for j in 0..d {
                out[j] = (gi[j] - ei[j] * dot) / norms[i];
            }
        }
        let dproj = bn_vec_backward(&mut self.bn, &dpre);
        let dpool = self.proj.backward(&dproj);
        self.pool.backward(&dpool)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.proj.visit_params(&format!("{prefix}.proj"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }
}

fn vec_to_5d(x: &Array2<f64>) -> Array5<f64> {
    let (n, c) = x.dim();
    x.clone().into_shape_with_order((n, c, 1, 1, 1)).expect("contiguous")
}

fn vec_from_5d(x: Array5<f64>) -> Array2<f64> {
    let (n, c, _, _, _) = x.dim();
    x.into_shape_with_order((n, c)).expect("contiguous")
}

fn bn_vec_infer(bn: &BatchNorm, x: &Array2<f64>) -> Array2<f64> {
    vec_from_5d(bn.infer(&vec_to_5d(x)))
}

fn bn_vec_train(bn: &mut BatchNorm, x: &Array2<f64>) -> Array2<f64> {
    vec_from_5d(bn.train_fwd(&vec_to_5d(x)))
}

fn bn_vec_backward(bn: &mut BatchNorm, dy: &Array2<f64>) -> Array2<f64> {
    vec_from_5d(bn.backward(&vec_to_5d(dy)))
}

/// Class prototype matrix, unit-norm rows. Kept out of weight decay: rows
/// are renormalized after every step, which cancels any radial shrinkage.
#[derive(Debug, Clone)]
pub struct ClassCenters {
    pub w: Param,
}

impl ClassCenters {
    pub fn new(num_classes: usize, rng: &mut Rng) -> Self {
        let mut p = Param::normal(&[num_classes, EMBED_DIM], 1.0, rng);
        p.decay = false;
        let mut centers = ClassCenters { w: p };
        centers.renormalize();
        centers
    }

    pub fn from_matrix(w: Array2<f64>) -> Result<Self> {
        if w.dim().1 != EMBED_DIM {
            return Err(Error::shape("class centers", EMBED_DIM, w.dim().1));
        }
        let mut p = Param::new(w.into_dyn(), false);
        p.decay = false;
        let mut centers = ClassCenters { w: p };
        centers.renormalize();
        Ok(centers)
    }

    pub fn num_classes(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        self.w
            .value
            .view()
            .into_dimensionality()
            .expect("centers are 2-d")
    }

    /// Scales every row back to unit norm; call after each optimizer step.
    pub fn renormalize(&mut self) {
        let k = self.num_classes();
        let mut w = self
            .w
            .value
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("centers are 2-d");
        for i in 0..k {
            let norm = w.row(i).dot(&w.row(i)).sqrt();
            if norm > 1e-12 {
                w.row_mut(i).mapv_inplace(|v| v / norm);
            }
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(crate::nn::join(prefix, "w"), &mut self.w);
    }
}

/// Forward half of the PR-Product: plain cosine logits `(N, K)`.
pub fn pr_product(embeddings: &Array2<f64>, centers: &ndarray::ArrayView2<f64>) -> Array2<f64> {
    let (n, _) = embeddings.dim();
    let k = centers.dim().0;
    let mut cos = Array2::<f64>::zeros((n, k));
    general_mat_mul(1.0, embeddings, &centers.t(), 0.0, &mut cos);
    cos
}

/// Backward half of the PR-Product. Gradients through each cosine are
/// scaled by `|sin theta| = sqrt(1 - cos^2)`, with no gradient through the
/// `|sin|` factor itself.
pub fn pr_product_backward(
    embeddings: &Array2<f64>,
    centers: &ndarray::ArrayView2<f64>,
    cosines: &Array2<f64>,
    dcos: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = embeddings.dim();
    let k = centers.dim().0;
    let mut gated = dcos.clone();
    gated.zip_mut_with(cosines, |g, &c| {
        *g *= (1.0 - c * c).max(0.0).sqrt();
    });
    let mut de = Array2::<f64>::zeros((n, d));
    let mut dw = Array2::<f64>::zeros((k, d));
    general_mat_mul(1.0, &gated, centers, 0.0, &mut de);
    general_mat_mul(1.0, &gated.t(), &embeddings.view(), 0.0, &mut dw);
    (de, dw)
}

/// Per-sample AM-Softmax value with the max-entropy clamp.
pub fn am_softmax_entropy_loss(cosines: ArrayView1<f64>, label: usize, params: &AmSoftmaxParams) -> Result<f64> {
    am_softmax_entropy_grad(cosines, label, params).map(|(l, _)| l)
}

/// Loss plus gradient w.r.t. the cosines. Where the clamp is active the
/// gradient is identically zero.
pub fn am_softmax_entropy_grad(
    cosines: ArrayView1<f64>,
    label: usize,
    params: &AmSoftmaxParams,
) -> Result<(f64, Array1<f64>)> {
    let k = cosines.len();
    if k < 2 {
        return Err(Error::Config(format!("AM-Softmax needs at least 2 classes, got {k}")));
    }
    if label >= k {
        return Err(Error::Config(format!("label {label} out of range for {k} classes")));
    }
    let s = params.scale;
    let alpha = params.entropy_weight;

    let mut z = cosines.mapv(|c| s * c);
    z[label] -= s * params.margin;
    let z_max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = z.mapv(|v| (v - z_max).exp());
    let denom = exp.sum();
    let p = exp / denom;

    let l_cross = -p[label].max(f64::MIN_POSITIVE).ln();
    let entropy = -p.fold(0.0, |acc, &pi| if pi > 0.0 { acc + pi * pi.ln() } else { acc });
    let pre_clamp = l_cross - alpha * entropy;
    if pre_clamp <= 0.0 {
        return Ok((0.0, Array1::zeros(k)));
    }

    // dL/dz = (p - y) + alpha * p * (ln p + H)
    let mut dz = p.clone();
    dz[label] -= 1.0;
    if alpha != 0.0 {
        for j in 0..k {
            let pj = p[j];
            if pj > 0.0 {
                dz[j] += alpha * pj * (pj.ln() + entropy);
            }
        }
    }
    Ok((pre_clamp, dz.mapv(|v| v * s)))
}

/// Hinge push between cross-class embeddings:
/// mean over unordered cross-class pairs of `[cos - (1 - delta)]+`.
pub fn push_loss(embeddings: &Array2<f64>, labels: &[usize], delta: f64) -> f64 {
    push_loss_grad(embeddings, labels, delta).0
}

pub fn push_loss_grad(embeddings: &Array2<f64>, labels: &[usize], delta: f64) -> (f64, Array2<f64>) {
    let (n, d) = embeddings.dim();
    assert_eq!(n, labels.len(), "labels must match batch");
    let threshold = 1.0 - delta;
    let mut pairs = 0usize;
    let mut active: Vec<(usize, usize, f64)> = Vec::new();
    let mut loss = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                continue;
            }
            pairs += 1;
            let cos = embeddings.row(i).dot(&embeddings.row(j));
            let margin = cos - threshold;
            if margin > 0.0 {
                loss += margin;
                active.push((i, j, 1.0));
            }
        }
    }
    let mut grad = Array2::<f64>::zeros((n, d));
    if pairs == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / pairs as f64;
    for (i, j, w) in active {
        let scale = w * inv;
        let (ei, ej) = (embeddings.row(i).to_owned(), embeddings.row(j).to_owned());
        grad.row_mut(i).scaled_add(scale, &ej);
        grad.row_mut(j).scaled_add(scale, &ei);
    }
    (loss * inv, grad)
}

/// The same hinge between class-center rows.
pub fn center_push_loss(centers: &ndarray::ArrayView2<f64>, delta: f64) -> Result<f64> {
    center_push_loss_grad(centers, delta).map(|(l, _)| l)
}

pub fn center_push_loss_grad(centers: &ndarray::ArrayView2<f64>, delta: f64) -> Result<(f64, Array2<f64>)> {
    let (k, d) = centers.dim();
    if k < 2 {
        return Err(Error::Config(format!("center push needs at least 2 classes, got {k}")));
    }
    let threshold = 1.0 - delta;
    let total_pairs = k * (k - 1) / 2;
    let inv = 1.0 / total_pairs as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((k, d));
    for a in 0..k {
        for b in (a + 1)..k {
            let cos = centers.row(a).dot(&centers.row(b));
            if cos - threshold > 0.0 {
                loss += cos - threshold;
                let (wa, wb) = (centers.row(a).to_owned(), centers.row(b).to_owned());
                grad.row_mut(a).scaled_add(inv, &wb);
                grad.row_mut(b).scaled_add(inv, &wa);
            }
        }
    }
    Ok((loss * inv, grad))
}

/// All components of one batch objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub am: f64,
    pub push: f64,
    pub cpush: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("am", self.am),
            ("push", self.push),
            ("cpush", self.cpush),
            ("tv", self.tv),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss component {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Full batch objective `L = L_AM + L_push + L_cpush + sum(TV)` plus
/// gradients w.r.t. the embeddings and the center matrix. The AM term uses
/// the PR-Product rule on its cosine gradients; the push terms use plain
/// gradients (only the last inner product gets the PR treatment).
pub fn total_loss_grad(
    embeddings: &Array2<f64>,
    labels: &[usize],
    centers: &ClassCenters,
    params: &AmSoftmaxParams,
    push_delta: f64,
    tv_terms: &[f64],
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    let (n, _) = embeddings.dim();
    assert_eq!(n, labels.len(), "labels must match batch");
    let w = centers.matrix();

    let cos = pr_product(embeddings, &w);
    let mut am_sum = 0.0;
    let mut dcos = Array2::<f64>::zeros(cos.dim());
    for i in 0..n {
        let (l, dci) = am_softmax_entropy_grad(cos.row(i), labels[i], params)?;
        am_sum += l;
        dcos.slice_mut(s![i, ..]).assign(&dci);
    }
    let inv_n = 1.0 / n as f64;
    let am = am_sum * inv_n;
    dcos.mapv_inplace(|v| v * inv_n);
    let (mut de, mut dw) = pr_product_backward(embeddings, &w, &cos, &dcos);

    let (push, de_push) = push_loss_grad(embeddings, labels, push_delta);
    de += &de_push;

    let (cpush, dw_push) = center_push_loss_grad(&w, push_delta)?;
    dw += &dw_push;

    let tv: f64 = tv_terms.iter().sum();
    let breakdown = LossBreakdown { am, push, cpush, tv, total: am + push + cpush + tv };
    breakdown.check_finite()?;
    Ok((breakdown, de, dw))
}
