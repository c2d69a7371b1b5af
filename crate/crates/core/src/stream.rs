//! Live-stream recognition over a sliding 16-frame window.
//!
//! The caller feeds frames already resampled to the model's frame rate,
//! each with a person box. Once the buffer holds a full window, every
//! further push crops all buffered frames by the running max box, runs one
//! inference pass and emits a prediction; the class is withheld when the
//! best cosine falls below the rejection threshold.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array3, Array4};

use crate::data::{crop_and_resize, to_model_input, BoundingBox, BoxReduce, InputNorm};
use crate::metric::ClassCenters;
use crate::model::Recognizer;
use crate::{Error, Result};

/// Default rejection threshold on the best cosine score.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;

/// Per-window output. `class` is `None` exactly when `confidence` is
/// below the threshold; `scores` is always populated.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub class: Option<usize>,
    pub confidence: f64,
    pub scores: Array1<f64>,
}

/// Cosine scores of one preprocessed `(3, T, S, S)` clip against every
/// class center.
pub fn predict_clip(model: &Recognizer, centers: &ClassCenters, clip: &Array4<f64>) -> Result<Array1<f64>> {
    let (c, t, h, w) = clip.dim();
    let batched = clip
        .clone()
        .into_shape_with_order((1, c, t, h, w))
        .expect("contiguous clip");
    let embedding = model.embed(&batched)?;
    let k = centers.num_classes();
    let mut scores = Array1::<f64>::zeros(k);
    let e = embedding.row(0);
    for (j, row) in centers.matrix().rows().into_iter().enumerate() {
        scores[j] = e.dot(&row);
    }
    Ok(scores)
}

/// Sliding-window state for one stream. Holds borrowed read-only model
/// state, so several streams can share one model.
pub struct StreamState<'a> {
    model: &'a Recognizer,
    centers: &'a ClassCenters,
    norm: InputNorm,
    threshold: f64,
    window: usize,
    out_size: usize,
    buffer: VecDeque<(Array3<f64>, BoundingBox)>,
}

impl<'a> StreamState<'a> {
    pub fn new(model: &'a Recognizer, centers: &'a ClassCenters, norm: InputNorm, threshold: f64) -> Self {
        let (_, t, size, _) = model.in_shape();
        StreamState {
            model,
            centers,
            norm,
            threshold,
            window: t,
            out_size: size,
            buffer: VecDeque::with_capacity(t),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Appends one `(H, W, 3)` frame and its box. Returns `Ok(None)` while
    /// the buffer is filling; afterwards exactly one prediction per push.
    /// An invalid box rejects the frame and leaves the buffer unchanged.
    pub fn push_frame(&mut self, frame: Array3<f64>, bbox: BoundingBox) -> Result<Option<Prediction>> {
        let (h, w, c) = frame.dim();
        if c != 3 {
            return Err(Error::shape("stream frame", "(H, W, 3)", frame.dim()));
        }
        if let Some((first, _)) = self.buffer.front() {
            if first.dim() != frame.dim() {
                return Err(Error::shape("stream frame", first.dim(), frame.dim()));
            }
        }
        let finite = [bbox.x0, bbox.y0, bbox.x1, bbox.y1].iter().all(|v| v.is_finite());
        if !finite || bbox.width() <= 0.0 || bbox.height() <= 0.0 || bbox.x0 < 0.0 || bbox.y0 < 0.0
            || bbox.x1 > w as f64 || bbox.y1 > h as f64
        {
            return Err(Error::Data(format!(
                "invalid box [{}, {}, {}, {}] for {w}x{h} frame",
                bbox.x0, bbox.y0, bbox.x1, bbox.y1
            )));
        }
        if self.buffer.len() == self.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back((frame, bbox));
        if self.buffer.len() < self.window {
            return Ok(None);
        }
        self.predict_window().map(Some)
    }

    fn predict_window(&self) -> Result<Prediction> {
        let (h, w, _) = self.buffer[0].0.dim();
        let t = self.window;
        let mut frames = Array4::<f64>::zeros((t, h, w, 3));
        let mut boxes = Vec::with_capacity(t);
        for (i, (frame, bbox)) in self.buffer.iter().enumerate() {
            frames.slice_mut(s![i, .., .., ..]).assign(frame);
            boxes.push(*bbox);
        }
        let cropped = crop_and_resize(&frames, &boxes, BoxReduce::Max, self.out_size)?;
        let clip = to_model_input(&cropped, &self.norm);
        let scores = predict_clip(self.model, self.centers, &clip)?;
        let best = crate::eval::argmax(&scores);
        let confidence = scores[best];
        let class = (confidence >= self.threshold).then_some(best);
        Ok(Prediction { class, confidence, scores })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, LayerSpec, Nonlinearity, OpKind};
    use crate::nn::testutil::{randn, rng};
    use crate::nn::Rng;

    fn tiny_model(seed: u64) -> (Recognizer, ClassCenters) {
        let cfg = BackboneConfig {
            input_spatial: 16,
            input_temporal: 4,
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
        let mut r = rng(seed);
        let model = Recognizer::build(cfg, &mut r).unwrap();
        let centers = ClassCenters::new(4, &mut r);
        (model, centers)
    }

    fn frame(h: usize, w: usize, r: &mut Rng) -> Array3<f64> {
        randn(&[h, w, 3], r)
            .mapv(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
            .into_dimensionality()
            .unwrap()
    }

    fn full_box(h: usize, w: usize) -> BoundingBox {
        BoundingBox { x0: 0.0, y0: 0.0, x1: w as f64, y1: h as f64 }
    }

    #[test]
    fn emits_nothing_until_the_window_fills_then_once_per_push() {
        let (model, centers) = tiny_model(150);
        let mut state = StreamState::new(&model, &centers, InputNorm::default(), 0.5);
        let mut r = rng(151);
        let mut emitted = 0usize;
        for i in 0..7 {
            let out = state.push_frame(frame(20, 24, &mut r), full_box(20, 24)).unwrap();
            if i < 3 {
                assert!(out.is_none(), "push {i} before the window filled");
            } else {
                assert!(out.is_some(), "push {i} after the window filled");
                emitted += 1;
            }
        }
        assert_eq!(emitted, 4);
        // The buffer slides: it never grows past the window length.
        assert_eq!(state.buffered(), 4);
    }

    #[test]
    fn scores_are_cosines_and_the_pass_is_deterministic() {
        let (model, centers) = tiny_model(152);
        let mut r = rng(153);
        let frames: Vec<Array3<f64>> = (0..4).map(|_| frame(18, 18, &mut r)).collect();
        let run = |frames: &[Array3<f64>]| {
            let mut state = StreamState::new(&model, &centers, InputNorm::default(), 0.5);
            let mut last = None;
            for f in frames {
                last = state.push_frame(f.clone(), full_box(18, 18)).unwrap();
            }
            last.unwrap()
        };
        let p1 = run(&frames);
        let p2 = run(&frames);
        assert_eq!(p1.scores, p2.scores);
        assert_eq!(p1.scores.len(), 4);
        for &sc in &p1.scores {
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&sc), "cosine out of range: {sc}");
        }
        assert!((p1.confidence - p1.scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b))).abs() < 1e-15);
    }

    #[test]
    fn prediction_matches_the_offline_pipeline_on_the_same_window() {
        let (model, centers) = tiny_model(154);
        let norm = InputNorm::default();
        let mut state = StreamState::new(&model, &centers, norm.clone(), 0.0);
        let mut r = rng(155);
        let (h, w) = (22, 26);
        let mut frames = Array4::<f64>::zeros((4, h, w, 3));
        let mut boxes = Vec::new();
        let mut out = None;
        for i in 0..4 {
            let f = frame(h, w, &mut r);
            let b = BoundingBox {
                x0: 1.0 + i as f64,
                y0: 2.0,
                x1: 20.0,
                y1: 18.0 + i as f64 * 0.5,
            };
            frames.slice_mut(s![i, .., .., ..]).assign(&f);
            boxes.push(b);
            out = state.push_frame(f, b).unwrap();
        }
        let stream_scores = out.unwrap().scores;
        let cropped = crop_and_resize(&frames, &boxes, BoxReduce::Max, 16).unwrap();
        let clip = to_model_input(&cropped, &norm);
        let offline = predict_clip(&model, &centers, &clip).unwrap();
        assert_eq!(stream_scores, offline);
    }

    #[test]
    fn class_is_withheld_below_the_threshold() {
        let (model, centers) = tiny_model(156);
        let mut r = rng(157);
        let frames: Vec<Array3<f64>> = (0..4).map(|_| frame(16, 16, &mut r)).collect();
        let predict_at = |threshold: f64| {
            let mut state = StreamState::new(&model, &centers, InputNorm::default(), threshold);
            let mut last = None;
            for f in &frames {
                last = state.push_frame(f.clone(), full_box(16, 16)).unwrap();
            }
            last.unwrap()
        };
        // A cosine can never reach 2.0, and never falls below -2.0.
        let rejected = predict_at(2.0);
        assert!(rejected.class.is_none());
        let accepted = predict_at(-2.0);
        assert_eq!(accepted.class, Some(crate::eval::argmax(&accepted.scores)));
        // The boundary is inclusive: threshold == confidence keeps the class.
        let edge = predict_at(accepted.confidence);
        assert!(edge.class.is_some());
        let above = predict_at(accepted.confidence + 1e-9);
        assert!(above.class.is_none());
    }

    #[test]
    fn only_the_last_window_determines_the_output() {
        let (model, centers) = tiny_model(158);
        let mut r = rng(159);
        let frames: Vec<Array3<f64>> = (0..10).map(|_| frame(16, 16, &mut r)).collect();
        let mut long = StreamState::new(&model, &centers, InputNorm::default(), 0.5);
        let mut last_long = None;
        for f in &frames {
            last_long = long.push_frame(f.clone(), full_box(16, 16)).unwrap();
        }
        let mut short = StreamState::new(&model, &centers, InputNorm::default(), 0.5);
        let mut last_short = None;
        for f in &frames[6..] {
            last_short = short.push_frame(f.clone(), full_box(16, 16)).unwrap();
        }
        assert_eq!(last_long.unwrap().scores, last_short.unwrap().scores);
    }

    #[test]
    fn invalid_boxes_are_rejected_without_corrupting_the_buffer() {
        let (model, centers) = tiny_model(160);
        let mut r = rng(161);
        let mut state = StreamState::new(&model, &centers, InputNorm::default(), 0.5);
        let good: Vec<Array3<f64>> = (0..4).map(|_| frame(16, 16, &mut r)).collect();
        state.push_frame(good[0].clone(), full_box(16, 16)).unwrap();
        // Degenerate, out-of-frame and non-finite boxes all fail.
        let bad = [
            BoundingBox { x0: 5.0, y0: 5.0, x1: 5.0, y1: 10.0 },
            BoundingBox { x0: -1.0, y0: 0.0, x1: 8.0, y1: 8.0 },
            BoundingBox { x0: 0.0, y0: 0.0, x1: 17.0, y1: 8.0 },
            BoundingBox { x0: 0.0, y0: f64::NAN, x1: 8.0, y1: 8.0 },
        ];
        for b in bad {
            assert!(state.push_frame(good[1].clone(), b).is_err());
            assert_eq!(state.buffered(), 1, "rejected frame must not be buffered");
        }
        // The stream still completes normally afterwards.
        let mut out = None;
        for f in &good[1..] {
            out = state.push_frame(f.clone(), full_box(16, 16)).unwrap();
        }
        assert!(out.is_some());
    }

    #[test]
    fn frame_geometry_must_stay_consistent() {
        let (model, centers) = tiny_model(162);
        let mut r = rng(163);
        let mut state = StreamState::new(&model, &centers, InputNorm::default(), 0.5);
        state.push_frame(frame(16, 16, &mut r), full_box(16, 16)).unwrap();
        // A different resolution mid-stream is a shape error.
        let err = state.push_frame(frame(18, 16, &mut r), full_box(18, 16)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        // So is a frame without three channels.
        let gray = Array3::<f64>::zeros((16, 16, 1));
        let err = state.push_frame(gray, full_box(16, 16)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert_eq!(state.buffered(), 1);
    }
}
