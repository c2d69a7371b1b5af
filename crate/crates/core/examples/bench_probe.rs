use ndarray::{s, Array4, Array5, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use signstream::backbone::BackboneConfig;
use signstream::data::{
    crop_and_resize, extract_window, load_clip, sample_training_window, to_model_input,
    window_boxes, BoxReduce, InputNorm,
};
use signstream::metric::{pr_product, total_loss_grad, AmSoftmaxParams};
use signstream::model::Recognizer;
use signstream::nn::Rng;
use signstream::synth::{generate_synthetic_dataset, SyntheticDatasetSpec};
use signstream::train::{init_class_centers, sgd_step};

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let lr = env_f64("LR", 0.05);
    let s = env_f64("S", 12.0);
    let margin = env_f64("MARGIN", 0.35);
    let steps = env_f64("STEPS", 75.0) as usize;
    let classes = env_f64("CLASSES", 10.0) as usize;
    let ent = env_f64("ENT", 0.2);
    let wd = env_f64("WD", 1e-4);
    let mom = env_f64("MOM", 0.9);
    let freeze = env_f64("FREEZE", 0.0) > 0.5;
    let fixed = env_f64("FIXED", 0.0) > 0.5;

    let per = env_f64("PER", 20.0) as usize;
    let nbatch = env_f64("BATCH", 8.0) as usize;
    let spec = SyntheticDatasetSpec {
        num_classes: classes,
        clips_per_class: per,
        frame_size: 64,
        clip_len_range: (16, 24),
        fps: 15.0,
        seed: 1,
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_dataset(&spec, dir.path()).unwrap();
    let clips: Vec<Array4<f64>> =
        manifest.clips.iter().map(|a| load_clip(&manifest.clip_path(a)).unwrap()).collect();

    let mut config = BackboneConfig::table_default();
    config.width_multiplier = 0.25;
    config.input_spatial = 64;
    config.input_temporal = 8;
    let mut rng = Rng::seed_from_u64(2);
    let mut model = Recognizer::build_with_dropout(config, 0.0, &mut rng).unwrap();
    if env_f64("EXPECTED", 0.0) > 0.5 {
        for b in &mut model.backbone.blocks {
            if let signstream::backbone::Block::Attention(a) = b {
                a.gumbel.mode = signstream::attention::GumbelMode::Expected;
            }
        }
        println!("attention: Expected mode (no gumbel noise)");
    }
    let mut centers = init_class_centers(classes, &mut rng);
    let am = AmSoftmaxParams { margin, scale: s, entropy_weight: ent };
    let norm = InputNorm::default();
    let (_, t, size, _) = model.in_shape();

    let mut prev_e: Option<ndarray::Array2<f64>> = None;
    let mut order: Vec<usize> = (0..manifest.clips.len()).collect();
    let mut pos = 0usize;
    let mut step_rng = Rng::seed_from_u64(3);
    order.shuffle(&mut step_rng);

    for step in 0..steps {
        let batch = nbatch.min(order.len() - pos);
        if batch < 2 {
            pos = 0;
            order.shuffle(&mut step_rng);
            continue;
        }
        let chunk: Vec<usize> = order[pos..pos + batch].to_vec();
        pos += batch;
        if pos >= order.len() {
            pos = 0;
            order.shuffle(&mut step_rng);
        }

        let mut x = Array5::<f64>::zeros((batch, 3, t, size, size));
        let mut labels = Vec::new();
        for (i, &idx) in chunk.iter().enumerate() {
            let ann = &manifest.clips[idx];
            let frames = &clips[idx];
            let start = if fixed {
                ((ann.segment.0 + ann.segment.1) / 2) as i64 - (t as i64) / 2
            } else {
                sample_training_window(ann, frames.dim().0, t, 0.6, &mut step_rng).unwrap()
            };
            let window = extract_window(frames, start, t);
            let boxes = window_boxes(&ann.boxes, start, t);
            let cropped = crop_and_resize(&window, &boxes, BoxReduce::Max, size).unwrap();
            x.slice_mut(s![i, .., .., .., ..]).assign(&to_model_input(&cropped, &norm));
            labels.push(ann.label);
        }

        if step == 0 {
            // Feature-scale report at init: backbone train-mode output and
            // the head's pooled/projected scales on this batch.
            let mut probe_model = model.clone();
            let feats = probe_model.backbone.train_fwd(&x, &mut step_rng.clone()).unwrap();
            let (n, c, ft, fh, fw) = feats.dim();
            let mut pooled = ndarray::Array2::<f64>::zeros((n, c));
            for i in 0..n {
                for ch in 0..c {
                    pooled[[i, ch]] =
                        feats.slice(s![i, ch, .., .., ..]).mean().unwrap();
                }
            }
            let mut mean_abs = 0.0;
            let mut std_sum = 0.0;
            for ch in 0..c {
                let col = pooled.column(ch);
                let m = col.mean().unwrap();
                let v = col.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                mean_abs += m.abs();
                std_sum += v.sqrt();
            }
            println!(
                "init scales: feat {c}x{ft}x{fh}x{fw}, pooled |chan mean| {:.3e}, pooled batch std {:.3e}",
                mean_abs / c as f64,
                std_sum / c as f64
            );
        }
        if std::env::var("CANARY").is_ok() {
            let lsum: usize = labels.iter().sum();
            let csum: f64 = centers.w.value.iter().map(|v| v.abs()).sum();
            let mut psum = 0.0;
            model.visit_params(&mut |_, p| psum += p.value.iter().map(|v| v.abs()).sum::<f64>());
            println!("canary step {step}: x_sum {:.9} labels {lsum} |params| {psum:.9} |centers| {csum:.9}", x.sum());
        }
        let e = model.train_fwd(&x, &mut step_rng).unwrap();
        let (breakdown, de, dw) =
            total_loss_grad(&e, &labels, &centers, &am, 0.3, &[]).unwrap();

        // Geometry: within-batch cross-clip cosines, own-center cosines.
        let mut cross = 0.0;
        let mut pairs = 0usize;
        for i in 0..batch {
            for j in 0..i {
                cross += e.row(i).dot(&e.row(j));
                pairs += 1;
            }
        }
        let cos = pr_product(&e, &centers.matrix());
        let mut own = 0.0;
        let mut other = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            own += cos[[i, l]];
            let best = (0..classes)
                .filter(|&k| k != l)
                .map(|k| cos[[i, k]])
                .fold(f64::NEG_INFINITY, f64::max);
            other += best;
        }
        let mut acc = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            let best = (0..classes).max_by(|&a, &b| cos[[i, a]].total_cmp(&cos[[i, b]])).unwrap();
            if best == l {
                acc += 1;
            }
        }
        let drift = prev_e
            .as_ref()
            .filter(|p| p.dim() == e.dim())
            .map(|p| {
                (0..batch).map(|i| e.row(i).dot(&p.row(i))).sum::<f64>() / batch as f64
            })
            .unwrap_or(f64::NAN);
        prev_e = Some(e.clone());
        let de_norm = de.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dw_norm = dw.iter().map(|v| v * v).sum::<f64>().sqrt();

        model.zero_grads();
        centers.w.zero_grad();
        centers.w.grad = dw.into_dyn();
        model.backward(&de, &[]);

        // Gradient norms of a few probes: first conv, last block, head.
        let mut g_first = 0.0;
        let mut g_head = 0.0;
        let mut g_total = 0.0;
        model.visit_params(&mut |name, p| {
            let n2: f64 = p.grad.iter().map(|v| v * v).sum();
            g_total += n2;
            if name.starts_with("backbone.block00.") || name.starts_with("backbone.block01.") {
                g_first += n2;
            }
            if name.starts_with("head.") {
                g_head += n2;
            }
        });
        println!(
            "step {step:3} loss {:.4} (am {:.4} push {:.4}) acc {acc}/{batch} own {:.3} other {:.3} cross {:.3} drift {drift:.3} |de| {de_norm:.2e} |dw| {dw_norm:.2e} g1 {:.2e} gh {:.2e} gT {:.2e}",
            breakdown.total,
            breakdown.am,
            breakdown.push,
            own / batch as f64,
            other / batch as f64,
            cross / pairs.max(1) as f64,
            g_first.sqrt(),
            g_head.sqrt(),
            g_total.sqrt(),
        );

        if freeze {
            model.visit_params(&mut |name, p| {
                if name.starts_with("head.") {
                    sgd_step(p, lr, mom, wd);
                }
            });
        } else {
            model.visit_params(&mut |_, p| sgd_step(p, lr, mom, wd));
        }
        sgd_step(&mut centers.w, lr, mom, wd);
        centers.renormalize();
    }

    // After training: deterministic-mode embeddings of one window per clip,
    // grouped by class, to see whether inference mode carries any signal.
    let mut per_class: Vec<Vec<ndarray::Array1<f64>>> = vec![Vec::new(); classes];
    for (idx, ann) in manifest.clips.iter().enumerate().take(40) {
        let frames = &clips[idx];
        let mid = ((ann.segment.0 + ann.segment.1) / 2) as i64 - (t as i64) / 2;
        let window = extract_window(frames, mid, t);
        let boxes = window_boxes(&ann.boxes, mid, t);
        let cropped = crop_and_resize(&window, &boxes, BoxReduce::Mean, size).unwrap();
        let mut x1 = Array5::<f64>::zeros((1, 3, t, size, size));
        x1.slice_mut(s![0, .., .., .., ..]).assign(&to_model_input(&cropped, &norm));
        let e = model.embed(&x1).unwrap();
        per_class[ann.label].push(e.index_axis(Axis(0), 0).to_owned());
    }
    let mut within = (0.0, 0usize);
    let mut across = (0.0, 0usize);
    for a in 0..classes {
        for (i, ea) in per_class[a].iter().enumerate() {
            for (j, eb) in per_class[a].iter().enumerate() {
                if j < i {
                    within.0 += ea.dot(eb);
                    within.1 += 1;
                }
            }
            for b in 0..a {
                for eb in &per_class[b] {
                    across.0 += ea.dot(eb);
                    across.1 += 1;
                }
            }
        }
    }
    println!(
        "infer-mode cosines: within-class {:.4} across-class {:.4}",
        within.0 / within.1.max(1) as f64,
        across.0 / across.1.max(1) as f64
    );
}
