//! Dataset manifest, clip IO, temporal window sampling, and the per-clip
//! augmentation chain.
//!
//! Clips are `(T, H, W, 3)` arrays with values in `[0, 1]`. Every
//! augmentation samples its parameters once per clip and applies the same
//! pixel mapping to every frame, so augment-then-slice equals
//! slice-then-augment.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::nn::Rng;
use crate::{Error, Result};

/// Axis-aligned box in pixel coordinates, `x` rightward, `y` downward,
/// half-open on the high side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        BoundingBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }
    }
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

/// One annotated gesture clip. `boxes` carries one entry per stored frame
/// (not just the segment), so jittered windows always have a box.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipAnnotation {
    pub path: String,
    pub label: usize,
    pub label_name: String,
    /// Half-open frame range `[start, end)` of the gesture.
    pub segment: (usize, usize),
    pub fps: f64,
    pub boxes: Vec<BoundingBox>,
}

impl ClipAnnotation {
    pub fn validate(&self, frame_size: (usize, usize)) -> Result<()> {
        let (h, w) = frame_size;
        let (start, end) = self.segment;
        if end <= start {
            return Err(Error::Data(format!(
                "{}: empty segment [{start}, {end})",
                self.path
            )));
        }
        if end > self.boxes.len() {
            return Err(Error::Data(format!(
                "{}: segment end {end} exceeds {} annotated frames",
                self.path,
                self.boxes.len()
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let ok = b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= w as f64 && b.y1 <= h as f64 && b.x1 > b.x0 && b.y1 > b.y0;
            if !ok {
                return Err(Error::Data(format!(
                    "{}: frame {i} box [{}, {}, {}, {}] outside {w}x{h} frame",
                    self.path, b.x0, b.y0, b.x1, b.y1
                )));
            }
        }
        Ok(())
    }
}

/// Whole-dataset manifest: class names plus one record per clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub clips: Vec<ClipAnnotation>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("reading manifest {}: {e}", path.display())))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("parsing manifest: {e}")))?;
        manifest.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        for clip in &manifest.clips {
            if clip.label >= manifest.classes.len() {
                return Err(Error::Data(format!(
                    "{}: label {} out of range for {} classes",
                    clip.path,
                    clip.label,
                    manifest.classes.len()
                )));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn clip_path(&self, ann: &ClipAnnotation) -> PathBuf {
        self.root.join(&ann.path)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

const RTV_MAGIC: &[u8; 4] = b"RTV1";

/// Reads a clip stored either as a raw tensor file (`.rtv`) or as a
/// directory of numbered PNG frames.
pub fn load_clip(path: &Path) -> Result<Array4<f64>> {
    if path.is_dir() {
        read_png_dir(path)
    } else {
        read_rtv(path)
    }
}

/// Raw tensor video: `RTV1` magic, little-endian u32 `T, H, W, C`, then
/// `T*H*W*C` bytes row-major.
pub fn write_rtv(path: &Path, clip: &Array4<f64>) -> Result<()> {
    let (t, h, w, c) = clip.dim();
    let mut buf = Vec::with_capacity(20 + clip.len());
    buf.extend_from_slice(RTV_MAGIC);
    for dim in [t, h, w, c] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in clip.iter() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_rtv(path: &Path) -> Result<Array4<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("opening {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != RTV_MAGIC {
        return Err(Error::Data(format!("{}: not an RTV file", path.display())));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(bytes[4 + i * 4..8 + i * 4].try_into().unwrap()) as usize;
    }
    let [t, h, w, c] = dims;
    let expected = 20 + t * h * w * c;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes for {t}x{h}x{w}x{c}, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[20..].iter().map(|&b| b as f64 / 255.0).collect();
    Array4::from_shape_vec((t, h, w, c), values).map_err(|e| Error::Data(format!("rtv reshape: {e}")))
}

pub fn write_png_dir(path: &Path, clip: &Array4<f64>) -> Result<()> {
    std::fs::create_dir_all(path)?;
    let (t, h, w, _) = clip.dim();
    for ti in 0..t {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (clip[[ti, y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (clip[[ti, y, x, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (clip[[ti, y, x, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path.join(format!("f{ti:05}.png")))
            .map_err(|e| Error::Data(format!("writing frame {ti}: {e}")))?;
    }
    Ok(())
}

pub fn read_png_dir(path: &Path) -> Result<Array4<f64>> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    if frames.is_empty() {
        return Err(Error::Data(format!("{}: no PNG frames", path.display())));
    }
    frames.sort();
    let mut clip: Option<Array4<f64>> = None;
    for (ti, frame) in frames.iter().enumerate() {
        let img = image::open(frame)
            .map_err(|e| Error::Data(format!("decoding {}: {e}", frame.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let clip = clip.get_or_insert_with(|| Array4::zeros((frames.len(), h, w, 3)));
        if clip.dim().1 != h || clip.dim().2 != w {
            return Err(Error::Data(format!("{}: inconsistent frame sizes", path.display())));
        }
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    clip[[ti, y, x, ch]] = px.0[ch] as f64 / 255.0;
                }
            }
        }
    }
    Ok(clip.unwrap())
}

/// Overlap between the ground-truth segment and a window, divided by
/// `min(|segment|, |window|)`. The window may extend past the video.
pub fn window_intersection_ratio(segment: (usize, usize), window: (i64, i64)) -> f64 {
    let (s, e) = (segment.0 as i64, segment.1 as i64);
    let (ws, we) = window;
    let overlap = (e.min(we) - s.max(ws)).max(0) as f64;
    let denom = (e - s).min(we - ws).max(1) as f64;
    overlap / denom
}

/// All in-bounds window starts satisfying the intersection threshold. A
/// video shorter than `t` yields the single fully-covering (left-padded)
/// window.
pub fn legal_window_starts(
    segment: (usize, usize),
    video_len: usize,
    t: usize,
    min_intersection: f64,
) -> Vec<i64> {
    if video_len < t {
        return vec![video_len as i64 - t as i64];
    }
    (0..=(video_len - t) as i64)
        .filter(|&w| window_intersection_ratio(segment, (w, w + t as i64)) >= min_intersection - 1e-12)
        .collect()
}

/// Uniformly samples a training window start; negative starts mean
/// first-frame padding.
pub fn sample_training_window(
    ann: &ClipAnnotation,
    video_len: usize,
    t: usize,
    min_intersection: f64,
    rng: &mut Rng,
) -> Result<i64> {
    let starts = legal_window_starts(ann.segment, video_len, t, min_intersection);
    if starts.is_empty() {
        // Unreachable for valid annotations: the max-overlap start is
        // always legal. Kept as a guard for inconsistent manifests.
        return Err(Error::Data(format!(
            "{}: no window of length {t} reaches intersection {min_intersection}",
            ann.path
        )));
    }
    Ok(starts[rng.random_range(0..starts.len())])
}

/// Extracts `[start, start+t)` from the clip, clamping out-of-range frame
/// indices to the nearest real frame (first-frame padding on the left).
pub fn extract_window(frames: &Array4<f64>, start: i64, t: usize) -> Array4<f64> {
    let (len, h, w, c) = frames.dim();
    let mut out = Array4::<f64>::zeros((t, h, w, c));
    for i in 0..t {
        let src = (start + i as i64).clamp(0, len as i64 - 1) as usize;
        out.slice_mut(s![i, .., .., ..]).assign(&frames.slice(s![src, .., .., ..]));
    }
    out
}

/// Per-frame boxes for the same index window, clamping like
/// `extract_window`.
pub fn window_boxes(boxes: &[BoundingBox], start: i64, t: usize) -> Vec<BoundingBox> {
    (0..t)
        .map(|i| boxes[(start + i as i64).clamp(0, boxes.len() as i64 - 1) as usize])
        .collect()
}

/// How per-frame boxes collapse into the single crop box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxReduce {
    /// Coordinate-wise union (training and live streaming).
    Max,
    /// Coordinate-wise arithmetic mean (evaluation protocol).
    Mean,
}

pub fn reduce_boxes(boxes: &[BoundingBox], mode: BoxReduce) -> Result<BoundingBox> {
    if boxes.is_empty() {
        return Err(Error::Data("no boxes to reduce".into()));
    }
    let b = match mode {
        BoxReduce::Max => boxes.iter().skip(1).fold(boxes[0], |acc, b| BoundingBox {
            x0: acc.x0.min(b.x0),
            y0: acc.y0.min(b.y0),
            x1: acc.x1.max(b.x1),
            y1: acc.y1.max(b.y1),
        }),
        BoxReduce::Mean => {
            let n = boxes.len() as f64;
            let sum = boxes.iter().fold([0.0; 4], |acc, b| {
                [acc[0] + b.x0, acc[1] + b.y0, acc[2] + b.x1, acc[3] + b.y1]
            });
            BoundingBox { x0: sum[0] / n, y0: sum[1] / n, x1: sum[2] / n, y1: sum[3] / n }
        }
    };
    if b.width() <= 0.0 || b.height() <= 0.0 {
        return Err(Error::Data(format!(
            "degenerate crop box [{}, {}, {}, {}]",
            b.x0, b.y0, b.x1, b.y1
        )));
    }
    Ok(b)
}

/// Pads the shorter side symmetrically so the box becomes square. The
/// result may extend past the frame; sampling clamps at the edges.
pub fn expand_to_square(b: BoundingBox) -> BoundingBox {
    let (w, h) = (b.width(), b.height());
    let side = w.max(h);
    let cx = (b.x0 + b.x1) / 2.0;
    let cy = (b.y0 + b.y1) / 2.0;
    BoundingBox {
        x0: cx - side / 2.0,
        y0: cy - side / 2.0,
        x1: cx + side / 2.0,
        y1: cy + side / 2.0,
    }
}

fn bilinear(frame: &ndarray::ArrayView3<f64>, sy: f64, sx: f64, ch: usize) -> f64 {
    let (h, w, _) = frame.dim();
    let clamp = |v: f64, max: usize| v.clamp(0.0, (max - 1) as f64);
    let sy = clamp(sy, h);
    let sx = clamp(sx, w);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let top = frame[[y0, x0, ch]] * (1.0 - fx) + frame[[y0, x1, ch]] * fx;
    let bot = frame[[y1, x0, ch]] * (1.0 - fx) + frame[[y1, x1, ch]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Collapses the per-frame boxes (`mode`), squares the result, crops every
/// frame with that one box, and bilinearly resizes to `out_size` square.
pub fn crop_and_resize(
    frames: &Array4<f64>,
    boxes: &[BoundingBox],
    mode: BoxReduce,
    out_size: usize,
) -> Result<Array4<f64>> {
    let crop = expand_to_square(reduce_boxes(boxes, mode)?);
    let (t, _, _, c) = frames.dim();
    let scale_y = crop.height() / out_size as f64;
    let scale_x = crop.width() / out_size as f64;
    let mut out = Array4::<f64>::zeros((t, out_size, out_size, c));
    for ti in 0..t {
        let frame = frames.slice(s![ti, .., .., ..]);
        for oy in 0..out_size {
            let sy = crop.y0 + (oy as f64 + 0.5) * scale_y - 0.5;
            for ox in 0..out_size {
                let sx = crop.x0 + (ox as f64 + 0.5) * scale_x - 0.5;
                for ci in 0..c {
                    out[[ti, oy, ox, ci]] = bilinear(&frame, sy, sx, ci);
                }
            }
        }
    }
    Ok(out)
}

/// Ranges the per-clip augmentation parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    pub mixup_prob: f64,
    pub mixup_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: 0.25,
            contrast: 0.25,
            saturation: 0.25,
            hue: 0.05,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            mixup_prob: 0.3,
            mixup_max: 0.4,
        }
    }
}

/// Rectangle erased (filled with noise) on every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EraseRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    /// `(h, w, 3)` noise patch shared by all frames.
    pub noise: Array3<f64>,
}

/// Concrete per-clip draw: one set of deltas applied identically to every
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub erase: Option<EraseRect>,
    pub mixup_weight: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            erase: None,
            mixup_weight: 0.0,
        }
    }
}

fn sample_erase_rect(frame_h: usize, frame_w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Option<EraseRect> {
    let area = (frame_h * frame_w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.erase_area.0..=cfg.erase_area.1);
        let aspect = rng.random_range(cfg.erase_aspect.0..=cfg.erase_aspect.1);
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h > frame_h || w > frame_w {
            continue;
        }
        let y = rng.random_range(0..=frame_h - h);
        let x = rng.random_range(0..=frame_w - w);
        let noise = Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0));
        return Some(EraseRect { y, x, h, w, noise });
    }
    None
}

/// Draws one parameter set for a clip of the given frame size.
pub fn sample_augment_params(frame_h: usize, frame_w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> AugmentParams {
    let sym = |range: f64, rng: &mut Rng| {
        if range > 0.0 {
            rng.random_range(-range..=range)
        } else {
            0.0
        }
    };
    let brightness = sym(cfg.brightness, rng);
    let contrast = sym(cfg.contrast, rng);
    let saturation = sym(cfg.saturation, rng);
    let hue = sym(cfg.hue, rng);
    let erase = if rng.random_range(0.0..1.0) < cfg.erase_prob {
        sample_erase_rect(frame_h, frame_w, cfg, rng)
    } else {
        None
    };
    let mixup_weight = if cfg.mixup_max > 0.0 && rng.random_range(0.0..1.0) < cfg.mixup_prob {
        rng.random_range(0.0..=cfg.mixup_max)
    } else {
        0.0
    };
    AugmentParams { brightness, contrast, saturation, hue, erase, mixup_weight }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Brightness (additive), contrast (pivot 0.5), saturation (blend with
/// per-pixel luma), hue (HSV rotation), in that order, clamped to `[0, 1]`.
pub fn photometric_augment(clip: &Array4<f64>, params: &AugmentParams) -> Array4<f64> {
    let (t, h, w, _) = clip.dim();
    let mut out = clip.clone();
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let mut px = [
                    out[[ti, y, x, 0]],
                    out[[ti, y, x, 1]],
                    out[[ti, y, x, 2]],
                ];
                for v in &mut px {
                    *v += params.brightness;
                    *v = 0.5 + (1.0 + params.contrast) * (*v - 0.5);
                }
                let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                for v in &mut px {
                    *v = luma + (1.0 + params.saturation) * (*v - luma);
                }
                if params.hue != 0.0 {
                    let clamped = [
                        px[0].clamp(0.0, 1.0),
                        px[1].clamp(0.0, 1.0),
                        px[2].clamp(0.0, 1.0),
                    ];
                    let (hh, ss, vv) = rgb_to_hsv(clamped[0], clamped[1], clamped[2]);
                    let (r, g, b) = hsv_to_rgb(hh + params.hue, ss, vv);
                    px = [r, g, b];
                }
                for (ci, v) in px.iter().enumerate() {
                    out[[ti, y, x, ci]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Fills the same rectangle with the same noise patch on every frame.
pub fn random_erase(clip: &Array4<f64>, rect: Option<&EraseRect>) -> Array4<f64> {
    let Some(rect) = rect else {
        return clip.clone();
    };
    let mut out = clip.clone();
    let t = out.dim().0;
    for ti in 0..t {
        out.slice_mut(s![ti, rect.y..rect.y + rect.h, rect.x..rect.x + rect.w, ..])
            .assign(&rect.noise);
    }
    out
}

/// Blends a static distractor image into every frame; the label is not
/// mixed.
pub fn mixup_distractor(clip: &Array4<f64>, image: &Array3<f64>, u: f64) -> Result<Array4<f64>> {
    if u == 0.0 {
        return Ok(clip.clone());
    }
    let (_, h, w, c) = clip.dim();
    if image.dim() != (h, w, c) {
        return Err(Error::shape("mixup distractor", (h, w, c), image.dim()));
    }
    let mut out = clip.clone();
    let t = out.dim().0;
    for ti in 0..t {
        let mut frame = out.slice_mut(s![ti, .., .., ..]);
        ndarray::Zip::from(&mut frame)
            .and(image)
            .for_each(|f, &d| *f = (1.0 - u) * *f + u * d);
    }
    Ok(out)
}

/// Per-channel normalization constants applied after scaling to `[0, 1]`.
/// Recorded in checkpoints so inference always matches training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for InputNorm {
    fn default() -> Self {
        InputNorm { mean: [0.5, 0.5, 0.5], std: [0.25, 0.25, 0.25] }
    }
}

/// `(T, H, W, 3)` clip to standardized channels-first `(3, T, H, W)`.
pub fn to_model_input(clip: &Array4<f64>, norm: &InputNorm) -> Array4<f64> {
    let (t, h, w, _) = clip.dim();
    let mut out = Array4::<f64>::zeros((3, t, h, w));
    for ci in 0..3 {
        let mean = norm.mean[ci];
        let inv_std = 1.0 / norm.std[ci];
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    out[[ci, ti, y, x]] = (clip[[ti, y, x, ci]] - mean) * inv_std;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{randn, rng};

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox { x0, y0, x1, y1 }
    }

    fn random_clip(t: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut r = rng(seed);
        randn(&[t, h, w, 3], &mut r)
            .mapv(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0))
            .into_dimensionality()
            .unwrap()
    }

    #[test]
    fn intersection_ratio_uses_the_shorter_span() {
        // Segment of 8 frames, window of 16: overlap 6 over denominator 8.
        assert!((window_intersection_ratio((10, 18), (0, 16)) - 0.75).abs() < 1e-15);
        // Window nested in a long segment: ratio 1 by the window's length.
        assert!((window_intersection_ratio((0, 20), (4, 12)) - 1.0).abs() < 1e-15);
        // Disjoint.
        assert_eq!(window_intersection_ratio((0, 4), (8, 24)), 0.0);
        // Left-padded window still counts its real-frame overlap.
        assert!((window_intersection_ratio((0, 8), (-8, 8)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn short_videos_get_one_padded_start() {
        assert_eq!(legal_window_starts((0, 10), 10, 16, 0.6), vec![-6]);
        assert_eq!(legal_window_starts((2, 5), 5, 16, 0.6), vec![-11]);
    }

    #[test]
    fn legal_starts_hand_range() {
        // Video 30, T = 16, segment [10, 18), threshold 0.6 * 8 = 4.8 frames.
        let starts = legal_window_starts((10, 18), 30, 16, 0.6);
        let want: Vec<i64> = (0..=13).collect();
        assert_eq!(starts, want);
    }

    #[test]
    fn legal_starts_match_brute_force() {
        let mut r = rng(120);
        for _ in 0..1000 {
            let video_len = r.random_range(16..60usize);
            let s = r.random_range(0..video_len - 1);
            let e = r.random_range(s + 1..=video_len);
            let starts = legal_window_starts((s, e), video_len, 16, 0.6);
            assert!(!starts.is_empty(), "segment ({s},{e}) in {video_len} has no window");
            for w in 0..=(video_len - 16) as i64 {
                let ratio = window_intersection_ratio((s, e), (w, w + 16));
                assert_eq!(
                    starts.contains(&w),
                    ratio >= 0.6 - 1e-12,
                    "start {w} for segment ({s},{e}) in {video_len}: ratio {ratio}"
                );
            }
        }
    }

    #[test]
    fn sampled_windows_stay_legal_and_vary() {
        let mut r = rng(121);
        let ann = ClipAnnotation {
            path: "x.rtv".into(),
            label: 0,
            label_name: "a".into(),
            segment: (10, 18),
            fps: 15.0,
            boxes: vec![bx(0.0, 0.0, 4.0, 4.0); 30],
        };
        let legal = legal_window_starts(ann.segment, 30, 16, 0.6);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let w = sample_training_window(&ann, 30, 16, 0.6, &mut r).unwrap();
            assert!(legal.contains(&w));
            seen.insert(w);
        }
        assert!(seen.len() > 5, "sampler collapsed to {} distinct starts", seen.len());
    }

    #[test]
    fn extract_window_pads_with_the_nearest_frame() {
        let frames = Array4::from_shape_fn((6, 1, 1, 3), |(t, _, _, _)| t as f64 / 10.0);
        let left = extract_window(&frames, -3, 6);
        let got: Vec<f64> = (0..6).map(|i| left[[i, 0, 0, 0]] * 10.0).collect();
        assert_eq!(got, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
        let right = extract_window(&frames, 4, 4);
        let got: Vec<f64> = (0..4).map(|i| right[[i, 0, 0, 0]] * 10.0).collect();
        assert_eq!(got, vec![4.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn window_boxes_index_like_extract_window() {
        let boxes: Vec<BoundingBox> = (0..5).map(|i| bx(i as f64, 0.0, i as f64 + 1.0, 1.0)).collect();
        let w = window_boxes(&boxes, -2, 4);
        let xs: Vec<f64> = w.iter().map(|b| b.x0).collect();
        assert_eq!(xs, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn box_reduction_hand_examples() {
        let boxes = [bx(0.0, 0.0, 10.0, 10.0), bx(5.0, 5.0, 20.0, 20.0)];
        let max = reduce_boxes(&boxes, BoxReduce::Max).unwrap();
        assert_eq!(max, bx(0.0, 0.0, 20.0, 20.0));
        let mean = reduce_boxes(&boxes, BoxReduce::Mean).unwrap();
        assert_eq!(mean, bx(2.5, 2.5, 15.0, 15.0));
        // Identical boxes: the two reductions agree.
        let same = [bx(1.0, 2.0, 3.0, 4.0); 4];
        assert_eq!(
            reduce_boxes(&same, BoxReduce::Max).unwrap(),
            reduce_boxes(&same, BoxReduce::Mean).unwrap()
        );
        assert!(reduce_boxes(&[], BoxReduce::Max).is_err());
        // Mean of boxes that cancel out to zero width.
        let degenerate = [bx(0.0, 0.0, 1.0, 0.0)];
        assert!(reduce_boxes(&degenerate, BoxReduce::Mean).is_err());
    }

    #[test]
    fn squaring_pads_the_short_side_symmetrically() {
        let sq = expand_to_square(bx(0.0, 0.0, 10.0, 20.0));
        assert_eq!(sq, bx(-5.0, 0.0, 15.0, 20.0));
        let sq = expand_to_square(bx(2.0, 2.0, 6.0, 6.0));
        assert_eq!(sq, bx(2.0, 2.0, 6.0, 6.0)); // already square
    }

    #[test]
    fn full_frame_crop_at_native_size_is_exact() {
        let clip = random_clip(2, 8, 8, 122);
        let boxes = vec![bx(0.0, 0.0, 8.0, 8.0); 2];
        let out = crop_and_resize(&clip, &boxes, BoxReduce::Max, 8).unwrap();
        for (a, b) in out.iter().zip(clip.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cropping_a_constant_region_keeps_the_constant() {
        let clip = Array4::from_elem((3, 10, 12, 3), 0.42);
        let boxes = vec![bx(1.0, 2.0, 9.0, 7.0); 3];
        let out = crop_and_resize(&clip, &boxes, BoxReduce::Mean, 5).unwrap();
        assert!(out.iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn photometric_identity_changes_nothing() {
        let clip = random_clip(2, 4, 4, 123);
        let out = photometric_augment(&clip, &AugmentParams::identity());
        assert_eq!(out, clip);
    }

    #[test]
    fn photometric_hand_checks() {
        let gray = Array4::from_elem((1, 1, 1, 3), 0.4);
        // Brightness is additive.
        let mut p = AugmentParams::identity();
        p.brightness = 0.2;
        let out = photometric_augment(&gray, &p);
        assert!((out[[0, 0, 0, 0]] - 0.6).abs() < 1e-12);
        // Contrast pivots on 0.5.
        let mut p = AugmentParams::identity();
        p.contrast = 0.5;
        let px = Array4::from_elem((1, 1, 1, 3), 0.75);
        let out = photometric_augment(&px, &p);
        assert!((out[[0, 0, 0, 0]] - 0.875).abs() < 1e-12);
        // Saturation leaves gray pixels alone.
        let mut p = AugmentParams::identity();
        p.saturation = 0.25;
        let out = photometric_augment(&gray, &p);
        assert!((out[[0, 0, 0, 0]] - 0.4).abs() < 1e-12);
        // A half-turn of hue maps pure red to cyan.
        let mut red = Array4::zeros((1, 1, 1, 3));
        red[[0, 0, 0, 0]] = 1.0;
        let mut p = AugmentParams::identity();
        p.hue = 0.5;
        let out = photometric_augment(&red, &p);
        assert!(out[[0, 0, 0, 0]].abs() < 1e-12);
        assert!((out[[0, 0, 0, 1]] - 1.0).abs() < 1e-12);
        assert!((out[[0, 0, 0, 2]] - 1.0).abs() < 1e-12);
        // Results clamp into [0, 1].
        let mut p = AugmentParams::identity();
        p.brightness = 0.9;
        let out = photometric_augment(&gray, &p);
        assert_eq!(out[[0, 0, 0, 0]], 1.0);
    }

    #[test]
    fn erase_fills_exactly_the_rectangle_on_every_frame() {
        let clip = random_clip(3, 8, 8, 124);
        let mut r = rng(125);
        let noise: Array3<f64> = randn(&[2, 3, 3], &mut r)
            .mapv(|v| v.clamp(0.0, 1.0))
            .into_dimensionality()
            .unwrap();
        let rect = EraseRect { y: 2, x: 4, h: 2, w: 3, noise };
        let out = random_erase(&clip, Some(&rect));
        for ((t, y, x, c), &v) in out.indexed_iter() {
            let inside = (2..4).contains(&y) && (4..7).contains(&x);
            if inside {
                assert_eq!(v, rect.noise[[y - 2, x - 4, c]], "frame {t} not erased");
            } else {
                assert_eq!(v, clip[[t, y, x, c]]);
            }
        }
        assert_eq!(random_erase(&clip, None), clip);
    }

    #[test]
    fn mixup_blends_a_static_distractor() {
        let clip = random_clip(2, 4, 4, 126);
        let image = random_clip(1, 4, 4, 127).index_axis_move(ndarray::Axis(0), 0);
        let out = mixup_distractor(&clip, &image, 0.25).unwrap();
        for ((t, y, x, c), &v) in out.indexed_iter() {
            let want = 0.75 * clip[[t, y, x, c]] + 0.25 * image[[y, x, c]];
            assert!((v - want).abs() < 1e-12);
        }
        assert_eq!(mixup_distractor(&clip, &image, 0.0).unwrap(), clip);
        let bad = Array3::<f64>::zeros((3, 3, 3));
        assert!(mixup_distractor(&clip, &bad, 0.1).is_err());
    }

    #[test]
    fn augment_then_slice_equals_slice_then_augment() {
        let clip = random_clip(8, 6, 6, 128);
        let mut r = rng(129);
        let mut params = sample_augment_params(6, 6, &AugmentConfig::default(), &mut r);
        params.brightness = 0.1;
        params.mixup_weight = 0.2;
        let image = random_clip(1, 6, 6, 130).index_axis_move(ndarray::Axis(0), 0);

        let apply = |c: &Array4<f64>| {
            let a = photometric_augment(c, &params);
            let a = random_erase(&a, params.erase.as_ref());
            mixup_distractor(&a, &image, params.mixup_weight).unwrap()
        };
        let full = apply(&clip);
        let sliced_after = full.slice(s![2..6, .., .., ..]).to_owned();
        let sliced_before = apply(&clip.slice(s![2..6, .., .., ..]).to_owned());
        assert_eq!(sliced_after, sliced_before);
    }

    #[test]
    fn rtv_round_trip_quantizes_to_a_byte() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.rtv");
        let clip = random_clip(3, 5, 4, 131);
        write_rtv(&path, &clip).unwrap();
        let back = read_rtv(&path).unwrap();
        assert_eq!(back.dim(), clip.dim());
        for (a, b) in clip.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // Corrupt header and truncated payload both fail loudly.
        std::fs::write(&path, b"nope").unwrap();
        assert!(read_rtv(&path).is_err());
        write_rtv(&path, &clip).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(read_rtv(&path).is_err());
    }

    #[test]
    fn png_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames");
        let clip = random_clip(3, 6, 5, 132);
        write_png_dir(&path, &clip).unwrap();
        let back = read_png_dir(&path).unwrap();
        assert_eq!(back.dim(), clip.dim());
        for (a, b) in clip.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // load_clip dispatches on directory-ness.
        assert_eq!(load_clip(&path).unwrap(), back);
        let empty = dir.path().join("empty");
        std::fs::create_dir(&empty).unwrap();
        assert!(read_png_dir(&empty).is_err());
    }

    #[test]
    fn manifest_validation_catches_bad_labels_and_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let good = serde_json::json!({
            "classes": ["a", "b"],
            "clips": [{
                "path": "clips/c0.rtv",
                "label": 1,
                "label_name": "b",
                "segment": [2, 10],
                "fps": 15.0,
                "boxes": vec![[0.0, 0.0, 4.0, 4.0]; 10],
            }],
        });
        std::fs::write(&path, good.to_string()).unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.num_classes(), 2);
        assert_eq!(m.clip_path(&m.clips[0]), dir.path().join("clips/c0.rtv"));

        let bad_label = serde_json::json!({
            "classes": ["a"],
            "clips": [{
                "path": "c.rtv", "label": 3, "label_name": "x",
                "segment": [0, 1], "fps": 15.0, "boxes": [[0.0,0.0,1.0,1.0]],
            }],
        });
        std::fs::write(&path, bad_label.to_string()).unwrap();
        assert!(DatasetManifest::load(&path).is_err());

        let unknown_field = serde_json::json!({"classes": [], "clips": [], "extra": 1});
        std::fs::write(&path, unknown_field.to_string()).unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }

    #[test]
    fn annotation_validation_errors() {
        let base = ClipAnnotation {
            path: "c.rtv".into(),
            label: 0,
            label_name: "a".into(),
            segment: (2, 6),
            fps: 15.0,
            boxes: vec![bx(0.0, 0.0, 4.0, 4.0); 8],
        };
        base.validate((8, 8)).unwrap();
        let mut empty = base.clone();
        empty.segment = (4, 4);
        assert!(empty.validate((8, 8)).is_err());
        let mut past_end = base.clone();
        past_end.segment = (2, 9);
        assert!(past_end.validate((8, 8)).is_err());
        let mut outside = base.clone();
        outside.boxes[3] = bx(-1.0, 0.0, 4.0, 4.0);
        assert!(outside.validate((8, 8)).is_err());
        let mut inverted = base;
        inverted.boxes[0] = bx(3.0, 3.0, 2.0, 4.0);
        assert!(inverted.validate((8, 8)).is_err());
    }

    #[test]
    fn model_input_standardizes_and_transposes() {
        let norm = InputNorm::default();
        let clip = random_clip(2, 3, 4, 133);
        let out = to_model_input(&clip, &norm);
        assert_eq!(out.dim(), (3, 2, 3, 4));
        for ((c, t, y, x), &v) in out.indexed_iter() {
            let want = (clip[[t, y, x, c]] - 0.5) / 0.25;
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn augment_sampler_respects_disabled_knobs() {
        let mut r = rng(134);
        let cfg = AugmentConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            erase_prob: 0.0,
            mixup_prob: 0.0,
            ..Default::default()
        };
        for _ in 0..50 {
            let p = sample_augment_params(16, 16, &cfg, &mut r);
            assert_eq!(p.brightness, 0.0);
            assert_eq!(p.contrast, 0.0);
            assert_eq!(p.saturation, 0.0);
            assert_eq!(p.hue, 0.0);
            assert!(p.erase.is_none());
            assert_eq!(p.mixup_weight, 0.0);
        }
        // Defaults land in range when enabled.
        let cfg = AugmentConfig::default();
        for _ in 0..50 {
            let p = sample_augment_params(16, 16, &cfg, &mut r);
            assert!(p.brightness.abs() <= cfg.brightness);
            assert!(p.mixup_weight <= cfg.mixup_max);
            if let Some(e) = &p.erase {
                assert!(e.y + e.h <= 16 && e.x + e.w <= 16);
                assert_eq!(e.noise.dim(), (e.h, e.w, 3));
            }
        }
    }
}
