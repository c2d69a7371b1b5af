use rand::SeedableRng;
use signstream::backbone::BackboneConfig;
use signstream::data::{AugmentConfig, InputNorm};
use signstream::eval::{evaluate, Top1Mode};
use signstream::metric::ScaleSchedule;
use signstream::model::Recognizer;
use signstream::nn::Rng;
use signstream::synth::{generate_synthetic_dataset, SyntheticDatasetSpec};
use signstream::train::{fit, init_class_centers, TrainConfig};

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let lr = env_f64("LR", 0.05);
    let dropout = env_f64("DROPOUT", 0.0);
    let augment_on = env_f64("AUG", 0.0) > 0.5;
    let s_start = env_f64("S_START", 12.0);
    let epochs = env_f64("EPOCHS", 12.0) as u32;
    let margin = env_f64("MARGIN", 0.35);
    let classes = env_f64("CLASSES", 10.0) as usize;
    let per = env_f64("PER", 20.0) as usize;
    let batch = env_f64("BATCH", 8.0) as usize;
    let warmup = env_f64("WARMUP", 2.0) as u32;
    println!("lr {lr} dropout {dropout} aug {augment_on} s_start {s_start} margin {margin} epochs {epochs} classes {classes} per {per} batch {batch}");

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
    let eval_spec = SyntheticDatasetSpec { clips_per_class: 5, seed: 99, ..spec };
    let eval_dir = tempfile::tempdir().unwrap();
    let eval_manifest = generate_synthetic_dataset(&eval_spec, eval_dir.path()).unwrap();

    let mut config = BackboneConfig::table_default();
    config.width_multiplier = 0.25;
    config.input_spatial = 64;
    config.input_temporal = 8;
    let mut rng = Rng::seed_from_u64(2);
    let mut model = Recognizer::build_with_dropout(config, dropout, &mut rng).unwrap();
    let mut centers = init_class_centers(classes, &mut rng);
    let augment = if augment_on {
        AugmentConfig::default()
    } else {
        AugmentConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            erase_prob: 0.0,
            mixup_prob: 0.0,
            ..AugmentConfig::default()
        }
    };
    let tv = env_f64("TV", 1.0);
    let drop_epoch = env_f64("DROP", (epochs - 2) as f64) as u32;
    let train_cfg = TrainConfig {
        base_lr: lr,
        warmup_epochs: warmup,
        tv_weight: tv,
        drop_epoch,
        max_epochs: epochs,
        batch_clips: batch,
        seed: 3,
        dropout_rate: dropout,
        margin,
        scale: ScaleSchedule {
            s_start,
            s_end: env_f64("S_END", 5.0),
            duration_epochs: env_f64("S_DUR", 1000.0) as u32,
        },
        augment,
        target_train_top1: Some(0.95),
        ..TrainConfig::default()
    };
    let outcome = fit(&mut model, &mut centers, &manifest, None, &train_cfg, &InputNorm::default(), None).unwrap();
    println!("reason {:?}, epochs {}", outcome.reason, outcome.history.len());
    let train_report =
        evaluate(&model, &centers, &manifest, &InputNorm::default(), Top1Mode::Balanced).unwrap();
    println!("train-eval top1 {:.3} plain {:.3} map {:.3}", train_report.top1, train_report.top1_plain, train_report.map);
    let report = evaluate(&model, &centers, &eval_manifest, &InputNorm::default(), Top1Mode::Balanced).unwrap();
    println!("eval top1 {:.3} plain {:.3} map {:.3}", report.top1, report.top1_plain, report.map);
}
