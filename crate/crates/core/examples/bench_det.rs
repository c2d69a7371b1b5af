use ndarray::{s, Array5, Axis};
use rand::SeedableRng;
use signstream::attention::GumbelMode;
use signstream::backbone::{BackboneConfig, Block};
use signstream::data::{
    crop_and_resize, extract_window, load_clip, to_model_input, window_boxes, BoxReduce,
    InputNorm,
};
use signstream::metric::{total_loss_grad, AmSoftmaxParams};
use signstream::model::Recognizer;
use signstream::nn::Rng;
use signstream::synth::{generate_synthetic_dataset, SyntheticDatasetSpec};
use signstream::train::{init_class_centers, sgd_step};

fn main() {
    let spec = SyntheticDatasetSpec {
        num_classes: 4,
        clips_per_class: 2,
        frame_size: 64,
        clip_len_range: (16, 24),
        fps: 15.0,
        seed: 1,
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_dataset(&spec, dir.path()).unwrap();

    let mut config = BackboneConfig::table_default();
    config.width_multiplier = 0.25;
    config.input_spatial = 64;
    config.input_temporal = 8;
    let mut rng = Rng::seed_from_u64(2);
    let mut model = Recognizer::build_with_dropout(config, 0.0, &mut rng).unwrap();
    for b in &mut model.backbone.blocks {
        if let Block::Attention(a) = b {
            a.gumbel.mode = GumbelMode::Expected;
        }
    }

    let norm = InputNorm::default();
    let (_, t, size, _) = model.in_shape();
    let n = 8;
    let mut x = Array5::<f64>::zeros((n, 3, t, size, size));
    for (i, ann) in manifest.clips.iter().enumerate() {
        let frames = load_clip(&manifest.clip_path(ann)).unwrap();
        let mid = ((ann.segment.0 + ann.segment.1) / 2) as i64 - (t as i64) / 2;
        let window = extract_window(&frames, mid, t);
        let boxes = window_boxes(&ann.boxes, mid, t);
        let cropped = crop_and_resize(&window, &boxes, BoxReduce::Max, size).unwrap();
        x.slice_mut(s![i, .., .., .., ..]).assign(&to_model_input(&cropped, &norm));
    }

    let mut r1 = Rng::seed_from_u64(9);
    let e1 = model.train_fwd(&x, &mut r1).unwrap();
    let mut r2 = Rng::seed_from_u64(9);
    let e2 = model.train_fwd(&x, &mut r2).unwrap();
    let max_diff = (&e1 - &e2).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    println!("repeat determinism: max |e1-e2| = {max_diff:.3e}");

    // Reverse the rows and compare per-clip embeddings.
    let mut xr = Array5::<f64>::zeros(x.dim());
    for i in 0..n {
        xr.index_axis_mut(Axis(0), i).assign(&x.index_axis(Axis(0), n - 1 - i));
    }
    let mut r3 = Rng::seed_from_u64(9);
    let e3 = model.train_fwd(&xr, &mut r3).unwrap();
    let mut max_perm = 0.0f64;
    let mut min_cos = f64::INFINITY;
    for i in 0..n {
        let a = e1.row(i);
        let b = e3.row(n - 1 - i);
        let d = a
            .iter()
            .zip(b.iter())
            .fold(0.0f64, |acc, (&u, &v)| acc.max((u - v).abs()));
        max_perm = max_perm.max(d);
        min_cos = min_cos.min(a.dot(&b));
    }
    println!("permutation equivariance: max |delta| = {max_perm:.3e}, min cos = {min_cos:.6}");

    // Forward -> backward -> forward: does backward corrupt the forward?
    let mut rb = Rng::seed_from_u64(9);
    let eb1 = model.train_fwd(&x, &mut rb).unwrap();
    let de = ndarray::Array2::<f64>::ones(eb1.dim());
    model.zero_grads();
    model.backward(&de, &[]);
    let mut rb2 = Rng::seed_from_u64(9);
    let eb2 = model.train_fwd(&x, &mut rb2).unwrap();
    let d_after_bwd = (&eb1 - &eb2).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    println!("after backward: max |delta| = {d_after_bwd:.3e}");

    // Probe-loop replica at lr 0: loss must stay constant.
    let mut centers = init_class_centers(4, &mut rng);
    let labels: Vec<usize> = manifest.clips.iter().map(|a| a.label).collect();
    let am = AmSoftmaxParams { margin: 0.0, scale: 12.0, entropy_weight: 0.2 };
    for step in 0..4 {
        let mut r = Rng::seed_from_u64(100 + step);
        let e = model.train_fwd(&x, &mut r).unwrap();
        let (breakdown, de, dw) = total_loss_grad(&e, &labels, &centers, &am, 0.3, &[]).unwrap();
        let p_sum = {
            let mut s = 0.0;
            model.visit_params(&mut |_, p| s += p.value.iter().map(|v| v.abs()).sum::<f64>());
            s
        };
        println!(
            "lr0 step {step}: loss {:.6} x_sum {:.6} |params| {:.6} |centers| {:.6}",
            breakdown.total,
            x.sum(),
            p_sum,
            centers.w.value.iter().map(|v| v.abs()).sum::<f64>()
        );
        model.zero_grads();
        centers.w.zero_grad();
        centers.w.grad = dw.into_dyn();
        model.backward(&de, &[]);
        model.visit_params(&mut |name, p| {
            if name.starts_with("head.") {
                sgd_step(p, 0.0, 0.0, 0.0);
            }
        });
        sgd_step(&mut centers.w, 0.0, 0.0, 0.0);
        centers.renormalize();
    }

    // Tiny input perturbation: flip one pixel by 1e-9.
    let mut xp = x.clone();
    xp[[0, 0, 0, 0, 0]] += 1e-9;
    let mut r4 = Rng::seed_from_u64(9);
    let e4 = model.train_fwd(&xp, &mut r4).unwrap();
    let mut worst = 0.0f64;
    for i in 0..n {
        let c = e1.row(i).dot(&e4.row(i));
        worst = worst.max(1.0 - c);
    }
    println!("1e-9 pixel bump: max (1 - cos) across batch = {worst:.3e}");
}
