//! Continuous-recognition test protocol and metrics.
//!
//! Each annotated gesture becomes exactly one sample: the central 16-frame
//! window of the segment (short segments left-padded by duplicating the
//! first frame), cropped by the mean person box over that window and
//! resized to the network input. Metrics are class-mean top-1 (plain
//! accuracy available behind a flag) and mAP with precision-at-hit APs.
//! No test-time augmentation of any kind.

use ndarray::{s, Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::{
    crop_and_resize, load_clip, to_model_input, BoxReduce, ClipAnnotation, DatasetManifest,
    InputNorm,
};
use crate::metric::ClassCenters;
use crate::model::Recognizer;
use crate::stream::predict_clip;
use crate::{Error, Result};

/// One protocol sample: standardized `(3, T, S, S)` input plus its label.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub clip: Array4<f64>,
    pub label: usize,
}

/// Frame indices of the central window: `[center - T/2, center + T/2)`
/// with `center = floor((start+end)/2)`, clipped to the segment, then
/// left-padded by repeating the first in-window frame.
pub fn eval_window_indices(segment: (usize, usize), t: usize) -> Result<Vec<usize>> {
    let (start, end) = segment;
    if end <= start {
        return Err(Error::Data(format!("empty segment [{start}, {end})")));
    }
    assert!(t >= 1, "window length must be >= 1");
    let center = ((start + end) / 2) as i64;
    let lo = center - (t / 2) as i64;
    let clipped_lo = lo.max(start as i64) as usize;
    let clipped_hi = ((lo + t as i64).min(end as i64)) as usize;
    let pad = t - (clipped_hi - clipped_lo);
    let mut indices = vec![clipped_lo; pad];
    indices.extend(clipped_lo..clipped_hi);
    Ok(indices)
}

/// Builds the protocol sample for one annotation. `frames` is the decoded
/// `(T, H, W, 3)` clip the annotation refers to.
pub fn build_eval_sample(
    ann: &ClipAnnotation,
    frames: &Array4<f64>,
    t: usize,
    out_size: usize,
    norm: &InputNorm,
) -> Result<EvalSample> {
    let indices = eval_window_indices(ann.segment, t)?;
    let available = frames.dim().0.min(ann.boxes.len());
    if let Some(&last) = indices.last() {
        if last >= available {
            return Err(Error::Data(format!(
                "{}: window needs frame {last} but only {available} frames are annotated",
                ann.path
            )));
        }
    }
    let (_, h, w, c) = frames.dim();
    let mut window = Array4::<f64>::zeros((t, h, w, c));
    for (i, &src) in indices.iter().enumerate() {
        window.slice_mut(s![i, .., .., ..]).assign(&frames.slice(s![src, .., .., ..]));
    }
    let boxes: Vec<_> = indices.iter().map(|&i| ann.boxes[i]).collect();
    let cropped = crop_and_resize(&window, &boxes, BoxReduce::Mean, out_size)?;
    Ok(EvalSample { clip: to_model_input(&cropped, norm), label: ann.label })
}

/// Which mean the top-1 metric takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Top1Mode {
    /// Mean over classes of per-class accuracy (default; robust to
    /// imbalance).
    Balanced,
    /// Plain fraction of correct samples.
    Plain,
}

pub fn top1(predictions: &[usize], labels: &[usize], mode: Top1Mode) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "top-1 needs equal non-empty inputs, got {} predictions / {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    match mode {
        Top1Mode::Plain => {
            let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
            Ok(correct as f64 / labels.len() as f64)
        }
        Top1Mode::Balanced => {
            let k = labels.iter().max().unwrap() + 1;
            let mut correct = vec![0usize; k];
            let mut count = vec![0usize; k];
            for (&p, &l) in predictions.iter().zip(labels) {
                count[l] += 1;
                if p == l {
                    correct[l] += 1;
                }
            }
            let mut sum = 0.0;
            let mut classes = 0usize;
            for ki in 0..k {
                if count[ki] > 0 {
                    sum += correct[ki] as f64 / count[ki] as f64;
                    classes += 1;
                }
            }
            Ok(sum / classes as f64)
        }
    }
}

/// Average precision for one class: samples ranked by score descending
/// (ties broken by sample index), AP = mean precision at each positive's
/// rank. `None` when the class has no positives.
fn average_precision(scores: &Array2<f64>, labels: &[usize], class: usize) -> Option<f64> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[[b, class]]
            .partial_cmp(&scores[[a, class]])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == class {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// mAP over classes with at least one positive, plus the per-class APs
/// (`None` marks excluded classes).
pub fn mean_ap(scores: &Array2<f64>, labels: &[usize]) -> Result<(f64, Vec<Option<f64>>)> {
    let (n, k) = scores.dim();
    if n == 0 || n != labels.len() {
        return Err(Error::Data(format!(
            "mAP needs equal non-empty inputs, got {n} score rows / {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} score columns")));
    }
    let per_class: Vec<Option<f64>> = (0..k).map(|c| average_precision(scores, labels, c)).collect();
    for (c, ap) in per_class.iter().enumerate() {
        if ap.is_none() {
            eprintln!("warning: class {c} has no positives; excluded from mAP");
        }
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Data("no class has a positive sample".into()));
    }
    Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
}

/// Evaluation result. `top1` follows the requested mode; the other
/// convention is reported alongside for reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub top1_mode: Top1Mode,
    pub top1_plain: f64,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub num_samples: usize,
}

/// Runs the full protocol over a manifest. Deterministic: samples are
/// evaluated in manifest order, one forward each.
pub fn evaluate(
    model: &Recognizer,
    centers: &ClassCenters,
    manifest: &DatasetManifest,
    norm: &InputNorm,
    mode: Top1Mode,
) -> Result<MetricsReport> {
    let (_, t, size, _) = model.in_shape();
    let n = manifest.clips.len();
    if n == 0 {
        return Err(Error::Data("manifest has no clips".into()));
    }
    let k = manifest.num_classes();
    let mut scores = Array2::<f64>::zeros((n, k));
    let mut predictions = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, ann) in manifest.clips.iter().enumerate() {
        let with_id = |e: Error| Error::Data(format!("sample {i} ({}): {e}", ann.path));
        let frames = load_clip(&manifest.clip_path(ann)).map_err(with_id)?;
        let sample = build_eval_sample(ann, &frames, t, size, norm).map_err(with_id)?;
        let row: Array1<f64> = predict_clip(model, centers, &sample.clip).map_err(with_id)?;
        predictions.push(argmax(&row));
        labels.push(sample.label);
        scores.slice_mut(s![i, ..]).assign(&row);
    }
    let (map, per_class_ap) = mean_ap(&scores, &labels)?;
    Ok(MetricsReport {
        top1: top1(&predictions, &labels, mode)?,
        top1_mode: mode,
        top1_plain: top1(&predictions, &labels, Top1Mode::Plain)?,
        map,
        per_class_ap,
        num_samples: n,
    })
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &Array1<f64>) -> usize {
    let mut best = 0usize;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, LayerSpec, Nonlinearity, OpKind};
    use crate::data::BoundingBox;
    use crate::nn::testutil::{randn, rng};
    use crate::synth::{generate_synthetic_dataset, SyntheticDatasetSpec};
    use rand::Rng;

    #[test]
    fn central_window_hand_examples() {
        // Long segment: a pure central slice, no padding.
        let idx = eval_window_indices((10, 40), 16).unwrap();
        let want: Vec<usize> = (17..33).collect();
        assert_eq!(idx, want);
        // Five-frame segment: 11 pad copies of frame 0, then frames 0..5.
        let idx = eval_window_indices((0, 5), 16).unwrap();
        let mut want = vec![0usize; 11];
        want.extend(0..5);
        assert_eq!(idx, want);
        // Off-center clipping on the right.
        let idx = eval_window_indices((4, 6), 4).unwrap();
        assert_eq!(idx, vec![4, 4, 4, 5]);
        assert!(eval_window_indices((5, 5), 16).is_err());
    }

    #[test]
    fn window_is_always_full_length_and_inside_the_segment() {
        let mut r = rng(140);
        for _ in 0..500 {
            let start = r.random_range(0..50usize);
            let end = start + r.random_range(1..40usize);
            let t = r.random_range(1..24usize);
            let idx = eval_window_indices((start, end), t).unwrap();
            assert_eq!(idx.len(), t);
            assert!(idx.iter().all(|&i| i >= start && i < end));
            // Pad prefix repeats the first real frame; the rest is contiguous.
            let first = idx[0];
            let pad = idx.iter().take_while(|&&i| i == first).count();
            for (off, &i) in idx[pad..].iter().enumerate() {
                assert_eq!(i, idx[pad - 1] + 1 + off);
            }
        }
    }

    #[test]
    fn eval_sample_pads_and_standardizes() {
        let frames = Array4::from_shape_fn((6, 8, 8, 3), |(f, _, _, _)| f as f64 / 10.0);
        let ann = ClipAnnotation {
            path: "c.rtv".into(),
            label: 2,
            label_name: "x".into(),
            segment: (0, 5),
            fps: 15.0,
            boxes: vec![BoundingBox { x0: 0.0, y0: 0.0, x1: 8.0, y1: 8.0 }; 6],
        };
        let norm = InputNorm::default();
        let sample = build_eval_sample(&ann, &frames, 8, 8, &norm).unwrap();
        assert_eq!(sample.label, 2);
        assert_eq!(sample.clip.dim(), (3, 8, 8, 8));
        // center = 2, lo = -2 -> indices [0, 0, 0, 0, 1, 2, 3, 4].
        let want_src = [0usize, 0, 0, 0, 1, 2, 3, 4];
        for (i, &src) in want_src.iter().enumerate() {
            let want = (src as f64 / 10.0 - 0.5) / 0.25;
            assert!((sample.clip[[0, i, 4, 4]] - want).abs() < 1e-12, "frame {i}");
        }
    }

    #[test]
    fn eval_sample_requires_annotated_frames() {
        let frames = Array4::<f64>::zeros((3, 8, 8, 3));
        let ann = ClipAnnotation {
            path: "c.rtv".into(),
            label: 0,
            label_name: "x".into(),
            segment: (0, 6), // claims more frames than stored
            fps: 15.0,
            boxes: vec![BoundingBox { x0: 0.0, y0: 0.0, x1: 8.0, y1: 8.0 }; 6],
        };
        assert!(build_eval_sample(&ann, &frames, 8, 8, &InputNorm::default()).is_err());
    }

    #[test]
    fn top1_hand_examples() {
        // Nine easy samples of class 0, one missed sample of class 1:
        // plain 0.9, balanced (1.0 + 0.0) / 2 = 0.5.
        let mut preds = vec![0usize; 9];
        preds.push(0);
        let mut labels = vec![0usize; 9];
        labels.push(1);
        assert!((top1(&preds, &labels, Top1Mode::Plain).unwrap() - 0.9).abs() < 1e-15);
        assert!((top1(&preds, &labels, Top1Mode::Balanced).unwrap() - 0.5).abs() < 1e-15);
        // Mixed per-class rates.
        let preds = [0, 1, 1, 0];
        let labels = [0, 1, 0, 0];
        assert!((top1(&preds, &labels, Top1Mode::Plain).unwrap() - 0.75).abs() < 1e-15);
        assert!((top1(&preds, &labels, Top1Mode::Balanced).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(top1(&[], &[], Top1Mode::Plain).is_err());
        assert!(top1(&[0], &[0, 1], Top1Mode::Plain).is_err());
    }

    #[test]
    fn average_precision_hand_examples() {
        // Class 0 positives at ranks 1 and 3: AP = (1 + 2/3) / 2 = 5/6.
        let scores = ndarray::array![
            [0.9, 0.2],
            [0.8, 0.6],
            [0.7, 0.3],
            [0.1, 0.5],
        ];
        let labels = [0usize, 1, 0, 1];
        let (map, per_class) = mean_ap(&scores, &labels).unwrap();
        assert!((per_class[0].unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!((per_class[1].unwrap() - 1.0).abs() < 1e-12);
        assert!((map - 11.0 / 12.0).abs() < 1e-12);

        // Single positive at rank 2: AP = 1/2.
        let scores = ndarray::array![[0.9, 0.0], [0.5, 0.0]];
        let labels = [1usize, 0];
        let (_, per_class) = mean_ap(&scores, &labels).unwrap();
        assert!((per_class[0].unwrap() - 0.5).abs() < 1e-12);

        // Positives at ranks 1 and 4 of 4: AP = (1 + 2/4) / 2 = 0.75.
        let scores = ndarray::array![[0.9, 0.0], [0.8, 0.0], [0.7, 0.0], [0.6, 0.0]];
        let labels = [0usize, 1, 1, 0];
        let (_, per_class) = mean_ap(&scores, &labels).unwrap();
        assert!((per_class[0].unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ap_ties_break_by_ascending_sample_index() {
        let scores = ndarray::array![[0.5, 0.0], [0.5, 0.0]];
        // Positive carries the higher index: it loses the tie, rank 2.
        let (_, per_class) = mean_ap(&scores, &[1, 0]).unwrap();
        assert!((per_class[0].unwrap() - 0.5).abs() < 1e-12);
        // Positive carries the lower index: rank 1.
        let (_, per_class) = mean_ap(&scores, &[0, 1]).unwrap();
        assert!((per_class[0].unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_a_pair_counting_oracle() {
        // Independent AP computation: for every positive, rank and hit
        // counts come from pairwise comparisons instead of a sort.
        fn oracle_ap(scores: &Array2<f64>, labels: &[usize], class: usize) -> Option<f64> {
            let n = labels.len();
            let mut sum = 0.0;
            let mut pos = 0usize;
            for i in 0..n {
                if labels[i] != class {
                    continue;
                }
                pos += 1;
                let mut rank = 1usize;
                let mut hits = 1usize;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let ahead = scores[[j, class]] > scores[[i, class]]
                        || (scores[[j, class]] == scores[[i, class]] && j < i);
                    if ahead {
                        rank += 1;
                        if labels[j] == class {
                            hits += 1;
                        }
                    }
                }
                sum += hits as f64 / rank as f64;
            }
            (pos > 0).then(|| sum / pos as f64)
        }

        let mut r = rng(141);
        let n = 1000;
        let k = 8;
        let scores: Array2<f64> = randn(&[n, k], &mut r).into_dimensionality().unwrap();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let (_, per_class) = mean_ap(&scores, &labels).unwrap();
        for c in 0..k {
            let want = oracle_ap(&scores, &labels, c);
            match (per_class[c], want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "class {c}: {a} vs {b}"),
                (a, b) => assert_eq!(a.is_some(), b.is_some()),
            }
        }
    }

    #[test]
    fn map_skips_classes_without_positives_and_rejects_bad_labels() {
        let scores = Array2::<f64>::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.1);
        let labels = [0usize, 1, 0, 1];
        let (map, per_class) = mean_ap(&scores, &labels).unwrap();
        assert!(per_class[2].is_none());
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        assert_eq!(present.len(), 2);
        assert!((map - present.iter().sum::<f64>() / 2.0).abs() < 1e-15);
        assert!(mean_ap(&scores, &[0, 1, 2, 3]).is_err());
        assert!(mean_ap(&scores, &[0]).is_err());
    }

    #[test]
    fn promoting_a_positive_never_hurts_its_class_ap() {
        let mut r = rng(142);
        for _ in 0..50 {
            let n = 20;
            let scores: Array2<f64> = randn(&[n, 2], &mut r).into_dimensionality().unwrap();
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
            let (_, before) = mean_ap(&scores, &labels).unwrap();
            // Promote one positive of class 0 to the top.
            let Some(pos) = labels.iter().position(|&l| l == 0) else {
                continue;
            };
            let mut bumped = scores.clone();
            let top = bumped.column(0).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            bumped[[pos, 0]] = top + 1.0;
            let (_, after) = mean_ap(&bumped, &labels).unwrap();
            assert!(
                after[0].unwrap() >= before[0].unwrap() - 1e-12,
                "promotion lowered AP: {} -> {}",
                before[0].unwrap(),
                after[0].unwrap()
            );
        }
    }

    #[test]
    fn map_is_invariant_to_sample_order_with_distinct_scores() {
        let mut r = rng(143);
        let n = 50;
        let scores: Array2<f64> = randn(&[n, 3], &mut r).into_dimensionality().unwrap();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let (map1, _) = mean_ap(&scores, &labels).unwrap();
        // Reverse the sample order.
        let mut rev = Array2::<f64>::zeros((n, 3));
        for i in 0..n {
            rev.slice_mut(s![i, ..]).assign(&scores.slice(s![n - 1 - i, ..]));
        }
        let rlabels: Vec<usize> = labels.iter().rev().copied().collect();
        let (map2, _) = mean_ap(&rev, &rlabels).unwrap();
        assert!((map1 - map2).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&ndarray::array![0.2, 0.8, 0.8]), 1);
        assert_eq!(argmax(&ndarray::array![0.9]), 0);
        assert_eq!(argmax(&ndarray::array![-1.0, -2.0]), 0);
    }

    #[test]
    fn full_protocol_runs_deterministically_on_a_synthetic_set() {
        let spec = SyntheticDatasetSpec {
            num_classes: 3,
            clips_per_class: 2,
            frame_size: 24,
            clip_len_range: (10, 14),
            fps: 15.0,
            seed: 21,
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic_dataset(&spec, dir.path()).unwrap();

        let cfg = BackboneConfig {
            input_spatial: 16,
            input_temporal: 8,
            width_multiplier: 1.0,
            layers: vec![
                LayerSpec {
                    op_kind: OpKind::Conv3d,
                    spatial_kernel: 3,
                    temporal_kernel: 1,
                    expand_size: None,
                    out_channels: 8,
                    use_se: false,
                    nonlinearity: Some(Nonlinearity::Hs),
                    spatial_stride: 2,
                    temporal_stride: 2,
                    use_dropout: false,
                },
            ],
        };
        let mut r = rng(144);
        let model = crate::model::Recognizer::build(cfg, &mut r).unwrap();
        let centers = ClassCenters::new(3, &mut r);
        let norm = InputNorm::default();

        let rep1 = evaluate(&model, &centers, &manifest, &norm, Top1Mode::Balanced).unwrap();
        let rep2 = evaluate(&model, &centers, &manifest, &norm, Top1Mode::Balanced).unwrap();
        assert_eq!(rep1.num_samples, 6);
        assert_eq!(rep1.per_class_ap.len(), 3);
        assert!((0.0..=1.0).contains(&rep1.top1));
        assert!((0.0..=1.0).contains(&rep1.top1_plain));
        assert!((0.0..=1.0).contains(&rep1.map));
        assert_eq!(rep1.top1, rep2.top1);
        assert_eq!(rep1.map, rep2.map);
        assert_eq!(rep1.top1_mode, Top1Mode::Balanced);
    }
}
