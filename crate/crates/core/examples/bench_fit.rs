use std::time::Instant;
use rand::SeedableRng;
use signstream::backbone::BackboneConfig;
use signstream::model::Recognizer;
use signstream::nn::Rng;
use signstream::synth::{generate_synthetic_dataset, SyntheticDatasetSpec};
use signstream::train::{fit, init_class_centers, TrainConfig};
use signstream::data::InputNorm;

fn main() {
    let spec = SyntheticDatasetSpec {
        num_classes: 10,
        clips_per_class: 20,
        frame_size: 64,
        clip_len_range: (16, 24),
        fps: 15.0,
        seed: 1,
    };
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let manifest = generate_synthetic_dataset(&spec, dir.path()).unwrap();
    println!("dataset: {:.2?} ({} clips)", t0.elapsed(), manifest.clips.len());

    let mut config = BackboneConfig::table_default();
    config.width_multiplier = 0.25;
    config.input_spatial = 64;
    config.input_temporal = 8;
    let mut rng = Rng::seed_from_u64(2);
    let mut model = Recognizer::build(config, &mut rng).unwrap();
    println!("params: {}", model.param_count());
    let mut centers = init_class_centers(10, &mut rng);
    let train_cfg = TrainConfig {
        warmup_epochs: 1,
        drop_epoch: 2,
        max_epochs: 3,
        batch_clips: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let outcome = fit(&mut model, &mut centers, &manifest, None, &train_cfg, &InputNorm::default(), None).unwrap();
    println!("3 epochs: {:.2?}, last train_top1 {:.3}", t1.elapsed(), outcome.history.last().unwrap().train_top1);
}
