//! SGD training loop: linear warm-up, one learning-rate drop, early
//! stopping on validation top-1, center renormalization after every step,
//! and per-epoch checkpoints.
//!
//! Determinism: one ChaCha stream seeded from `TrainConfig::seed` drives
//! shuffling, window jitter, augmentation draws, dropout and Gumbel
//! sampling in a fixed order, so two runs with the same seed produce
//! identical loss histories bit for bit.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4, Array5, Axis};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::attention::{hard_tv_loss_grad, Neighborhood};
use crate::ckpt::save_checkpoint;
use crate::data::{
    crop_and_resize, extract_window, load_clip, mixup_distractor, photometric_augment,
    random_erase, sample_augment_params, sample_training_window, to_model_input, window_boxes,
    AugmentConfig, BoxReduce, DatasetManifest, InputNorm,
};
use crate::eval::{evaluate, Top1Mode};
use crate::metric::{
    pr_product, total_loss_grad, AmSoftmaxParams, ClassCenters, LossBreakdown, ScaleSchedule,
};
use crate::model::Recognizer;
use crate::nn::{Param, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: u32,
    pub warmup_start_lr: f64,
    /// Last epoch at the base rate; the drop applies strictly after it.
    pub drop_epoch: u32,
    pub drop_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_clips: usize,
    pub max_epochs: u32,
    /// Epochs without a validation top-1 improvement before stopping.
    pub patience: u32,
    pub seed: u64,
    /// Minimum window/segment intersection for training windows.
    pub min_intersection: f64,
    pub margin: f64,
    pub entropy_weight: f64,
    pub push_delta: f64,
    pub tv_weight: f64,
    pub dropout_rate: f64,
    pub scale: ScaleSchedule,
    pub augment: AugmentConfig,
    /// Stop once the running train top-1 reaches this value, if set.
    pub target_train_top1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            warmup_epochs: 5,
            warmup_start_lr: 1e-4,
            drop_epoch: 25,
            drop_factor: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_clips: 8,
            max_epochs: 30,
            patience: 5,
            seed: 7,
            min_intersection: 0.6,
            margin: 0.35,
            entropy_weight: 0.2,
            push_delta: 0.3,
            tv_weight: 1.0,
            dropout_rate: crate::backbone::DEFAULT_DROPOUT_RATE,
            scale: ScaleSchedule::default(),
            augment: AugmentConfig::default(),
            target_train_top1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_epochs < self.drop_epoch && self.drop_epoch < self.max_epochs) {
            return Err(Error::Config(format!(
                "need warmup_epochs < drop_epoch < max_epochs, got {} / {} / {}",
                self.warmup_epochs, self.drop_epoch, self.max_epochs
            )));
        }
        if !(self.warmup_start_lr > 0.0 && self.warmup_start_lr <= self.base_lr) {
            return Err(Error::Config(format!(
                "need 0 < warmup_start_lr <= base_lr, got {} and {}",
                self.warmup_start_lr, self.base_lr
            )));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor <= 1.0) {
            return Err(Error::Config(format!("drop_factor must be in (0, 1], got {}", self.drop_factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_clips < 2 {
            // The embedding head normalizes over the batch; one clip gives
            // it a degenerate all-zero vector at initialization.
            return Err(Error::Config(format!("batch_clips must be >= 2, got {}", self.batch_clips)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.min_intersection > 0.0 && self.min_intersection <= 1.0) {
            return Err(Error::Config(format!(
                "min_intersection must be in (0, 1], got {}",
                self.min_intersection
            )));
        }
        if self.tv_weight < 0.0 {
            return Err(Error::Config(format!("tv_weight must be >= 0, got {}", self.tv_weight)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if !(0.0..=1.0).contains(&self.push_delta) {
            return Err(Error::Config(format!("push_delta must be in [0, 1], got {}", self.push_delta)));
        }
        if let Some(t) = self.target_train_top1 {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("target_train_top1 must be in (0, 1], got {t}")));
            }
        }
        self.scale.validate()?;
        self.am_params(self.scale.s_start).validate()
    }

    pub fn am_params(&self, scale: f64) -> AmSoftmaxParams {
        AmSoftmaxParams { margin: self.margin, scale, entropy_weight: self.entropy_weight }
    }
}

/// Piecewise learning-rate schedule: linear warm-up from
/// `warmup_start_lr` to `base_lr` over `[0, warmup_epochs)`, flat until
/// `drop_epoch` inclusive, then one multiplicative drop.
pub fn lr_at(config: &TrainConfig, epoch: u32) -> f64 {
    if epoch < config.warmup_epochs {
        let f = epoch as f64 / config.warmup_epochs as f64;
        config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * f
    } else if epoch <= config.drop_epoch {
        config.base_lr
    } else {
        config.base_lr * config.drop_factor
    }
}

/// Random unit-norm class centers; rows of an isotropic Gaussian,
/// normalized.
pub fn init_class_centers(num_classes: usize, rng: &mut Rng) -> ClassCenters {
    ClassCenters::new(num_classes, rng)
}

/// One SGD-with-momentum update: `v <- mu v + (g + wd theta)`,
/// `theta <- theta - lr v`. Decay is skipped for parameters that opt out
/// (normalization affine terms, biases, class centers).
pub fn sgd_step(p: &mut Param, lr: f64, momentum: f64, weight_decay: f64) {
    let wd = if p.decay { weight_decay } else { 0.0 };
    ndarray::Zip::from(&mut p.vel)
        .and(&p.grad)
        .and(&p.value)
        .for_each(|v, &g, &th| *v = momentum * *v + g + wd * th);
    ndarray::Zip::from(&mut p.value)
        .and(&p.vel)
        .for_each(|th, &v| *th -= lr * v);
}

/// One history line. Validation fields are absent without a validation
/// set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    pub scale: f64,
    pub loss: LossBreakdown,
    /// Accuracy on the augmented training windows of this epoch.
    pub train_top1: f64,
    pub val_top1: Option<f64>,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    NoValImprovement,
    TrainTargetReached,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<u32>,
    pub best_val_top1: Option<f64>,
    pub reason: StopReason,
}

fn load_all_clips(manifest: &DatasetManifest) -> Result<Vec<Array4<f64>>> {
    manifest
        .clips
        .iter()
        .map(|ann| {
            let frames = load_clip(&manifest.clip_path(ann))?;
            let (len, h, w, _) = frames.dim();
            ann.validate((h, w))?;
            if ann.boxes.len() != len {
                return Err(Error::Data(format!(
                    "{}: {} boxes for {len} frames",
                    ann.path,
                    ann.boxes.len()
                )));
            }
            Ok(frames)
        })
        .collect()
}

/// Jitter, crop, photometric, erase, mixup and normalization for one
/// batch. Mixup distractors are static frames of other clips in the batch.
fn build_batch(
    manifest: &DatasetManifest,
    clips: &[Array4<f64>],
    indices: &[usize],
    config: &TrainConfig,
    norm: &InputNorm,
    t: usize,
    size: usize,
    rng: &mut Rng,
) -> Result<(Array5<f64>, Vec<usize>)> {
    let n = indices.len();
    let mut staged = Vec::with_capacity(n);
    let mut mix = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for &idx in indices {
        let ann = &manifest.clips[idx];
        let frames = &clips[idx];
        let start = sample_training_window(ann, frames.dim().0, t, config.min_intersection, rng)?;
        let window = extract_window(frames, start, t);
        let boxes = window_boxes(&ann.boxes, start, t);
        let cropped = crop_and_resize(&window, &boxes, BoxReduce::Max, size)?;
        let params = sample_augment_params(size, size, &config.augment, rng);
        let lit = photometric_augment(&cropped, &params);
        staged.push(random_erase(&lit, params.erase.as_ref()));
        mix.push(params.mixup_weight);
        labels.push(ann.label);
    }
    let originals = staged.clone();
    for i in 0..n {
        if mix[i] > 0.0 && n > 1 {
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let frame = rng.random_range(0..t);
            let image = originals[j].index_axis(Axis(0), frame).to_owned();
            staged[i] = mixup_distractor(&staged[i], &image, mix[i])?;
        }
    }
    let mut x = Array5::<f64>::zeros((n, 3, t, size, size));
    for (i, clip) in staged.iter().enumerate() {
        x.slice_mut(s![i, .., .., .., ..]).assign(&to_model_input(clip, norm));
    }
    Ok((x, labels))
}

/// Per-block TV losses and score gradients from the attention maps cached
/// by the last training forward. Both carry the batch-mean factor and
/// `tv_weight`.
fn attention_tv(model: &Recognizer, weight: f64) -> Result<(Vec<f64>, Vec<Array4<f64>>)> {
    if weight == 0.0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let nbhd = Neighborhood::cube26();
    let mut terms = Vec::new();
    let mut grads = Vec::new();
    for scores in model.backbone.attention_scores() {
        let (n, t, h, w) = scores.dim();
        let inv = weight / n as f64;
        let mut g = Array4::<f64>::zeros((n, t, h, w));
        let mut sum = 0.0;
        for b in 0..n {
            let map = scores.index_axis(Axis(0), b).to_owned();
            let (l, gb) = hard_tv_loss_grad(&map, &nbhd)?;
            sum += l;
            g.index_axis_mut(Axis(0), b).assign(&(gb * inv));
        }
        terms.push(sum * inv);
        grads.push(g);
    }
    Ok((terms, grads))
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the full loop. With `out_dir` set, writes `history.jsonl`,
/// `last.ckpt` every epoch and `best.ckpt` on validation improvement.
/// A non-finite loss aborts with an error pointing at the last good
/// checkpoint; nothing earlier is rolled back.
pub fn fit(
    model: &mut Recognizer,
    centers: &mut ClassCenters,
    train_set: &DatasetManifest,
    val_set: Option<&DatasetManifest>,
    config: &TrainConfig,
    norm: &InputNorm,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    if centers.num_classes() != train_set.num_classes() {
        return Err(Error::Config(format!(
            "{} centers for {} dataset classes",
            centers.num_classes(),
            train_set.num_classes()
        )));
    }
    let (_, t, size, _) = model.in_shape();
    let clips = load_all_clips(train_set)?;
    let mut rng = Rng::seed_from_u64(config.seed);

    let mut history_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(File::create(dir.join("history.jsonl"))?)
        }
        None => None,
    };
    let mut last_ckpt: Option<PathBuf> = None;

    let mut history = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut stale = 0u32;
    let mut reason = StopReason::MaxEpochs;

    'epochs: for epoch in 0..config.max_epochs {
        let lr = lr_at(config, epoch);
        let scale = config.scale.scale_at(epoch);
        let am = config.am_params(scale);

        let mut order: Vec<usize> = (0..train_set.clips.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 5];
        let mut batches = 0u32;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_clips) {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two clips
            }
            let (x, labels) = build_batch(train_set, &clips, chunk, config, norm, t, size, &mut rng)?;
            let embeddings = model.train_fwd(&x, &mut rng)?;
            let (tv_terms, dscores) = attention_tv(model, config.tv_weight)?;
            let (breakdown, de, dw) =
                total_loss_grad(&embeddings, &labels, centers, &am, config.push_delta, &tv_terms)
                    .map_err(|e| match e {
                        Error::NonFinite(what) => {
                            let hint = last_ckpt
                                .as_ref()
                                .map(|p| format!("; last good checkpoint: {}", p.display()))
                                .unwrap_or_default();
                            Error::NonFinite(format!("{what} at epoch {epoch}{hint}"))
                        }
                        other => other,
                    })?;

            let cos = pr_product(&embeddings, &centers.matrix());
            for (i, &label) in labels.iter().enumerate() {
                if argmax_row(cos.row(i)) == label {
                    correct += 1;
                }
            }
            seen += labels.len();

            model.zero_grads();
            centers.w.zero_grad();
            centers.w.grad = dw.into_dyn();
            model.backward(&de, &dscores);
            model.visit_params(&mut |_, p| sgd_step(p, lr, config.momentum, config.weight_decay));
            sgd_step(&mut centers.w, lr, config.momentum, config.weight_decay);
            centers.renormalize();

            for (acc, v) in sums.iter_mut().zip([
                breakdown.am,
                breakdown.push,
                breakdown.cpush,
                breakdown.tv,
                breakdown.total,
            ]) {
                *acc += v;
            }
            batches += 1;
        }
        if seen == 0 {
            return Err(Error::Data(format!(
                "no trainable batch: {} clips with batch_clips {}",
                train_set.clips.len(),
                config.batch_clips
            )));
        }

        let inv_b = 1.0 / batches as f64;
        let loss = LossBreakdown {
            am: sums[0] * inv_b,
            push: sums[1] * inv_b,
            cpush: sums[2] * inv_b,
            tv: sums[3] * inv_b,
            total: sums[4] * inv_b,
        };
        let train_top1 = correct as f64 / seen as f64;
        let (val_top1, val_map) = match val_set {
            Some(v) => {
                let report = evaluate(model, centers, v, norm, Top1Mode::Balanced)?;
                (Some(report.top1), Some(report.map))
            }
            None => (None, None),
        };

        let record = EpochRecord { epoch, lr, scale, loss, train_top1, val_top1, val_map };
        eprintln!(
            "epoch {epoch:3} lr {lr:.5} s {scale:5.2} loss {:.4} (am {:.4} push {:.4} cpush {:.4} tv {:.4}) train {:.3}{}",
            loss.total,
            loss.am,
            loss.push,
            loss.cpush,
            loss.tv,
            train_top1,
            val_top1.map(|v| format!(" val {v:.3}")).unwrap_or_default()
        );
        if let Some(f) = &mut history_file {
            writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes"))?;
        }
        history.push(record);

        if let Some(dir) = out_dir {
            let path = dir.join("last.ckpt");
            save_checkpoint(&path, model, centers, norm, epoch, &rng)?;
            last_ckpt = Some(path);
        }

        if let Some(vt) = val_top1 {
            if vt > best_val + 1e-12 {
                best_val = vt;
                best_epoch = Some(epoch);
                stale = 0;
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("best.ckpt"), model, centers, norm, epoch, &rng)?;
                }
            } else {
                stale += 1;
                if stale >= config.patience {
                    reason = StopReason::NoValImprovement;
                    break 'epochs;
                }
            }
        }
        if let Some(target) = config.target_train_top1 {
            if train_top1 >= target {
                reason = StopReason::TrainTargetReached;
                break 'epochs;
            }
        }
    }

    Ok(FitOutcome {
        history,
        best_epoch,
        best_val_top1: best_epoch.map(|_| best_val),
        reason,
    })
}
