use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::Axis;
use rand::SeedableRng;

use signstream::ckpt::load_checkpoint;
use signstream::config::{parse_config, RunConfig};
use signstream::data::{read_png_dir, BoundingBox, DatasetManifest};
use signstream::eval::evaluate;
use signstream::model::Recognizer;
use signstream::nn::Rng;
use signstream::stream::StreamState;
use signstream::synth::generate_synthetic_dataset;
use signstream::train::{fit, init_class_centers};

#[derive(Parser)]
#[command(name = "signstream", version, about = "Continuous sign-gesture recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; every omitted key takes its documented
    /// default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set train.base_lr=0.02 (repeatable;
    /// wins over the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        Ok(parse_config(self.config.as_deref(), &self.set)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic motion-gesture dataset.
    SynthData {
        /// TOML file whose [synth] table describes the dataset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory; receives clips/ and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a recognizer on a dataset manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training manifest (manifest.json).
        #[arg(long)]
        data: PathBuf,
        /// Validation manifest; enables early stopping.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory for checkpoints, history and the config echo.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the continuous-recognition protocol and write a metrics report.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame streaming predictions over a directory of numbered frames.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of numbered PNG frames at the model frame rate.
        #[arg(long)]
        frames_dir: PathBuf,
        /// Box file: one `x0 y0 x1 y1` line per frame.
        #[arg(long)]
        boxes: PathBuf,
        /// Prediction lines go here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional manifest supplying class names.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print a checkpoint summary.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::SynthData { spec, set, out } => synth_data(spec.as_deref(), &set, &out),
        Command::Train { config, data, val, out } => train(&config, &data, val.as_deref(), &out),
        Command::Evaluate { config, checkpoint, data, out } => {
            run_evaluate(&config, &checkpoint, &data, &out)
        }
        Command::Infer { config, checkpoint, frames_dir, boxes, out, data } => {
            infer(&config, &checkpoint, &frames_dir, &boxes, out.as_deref(), data.as_deref())
        }
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn write_echo(dir: &Path, config: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml_string())?;
    Ok(())
}

fn synth_data(spec: Option<&Path>, set: &[String], out: &Path) -> anyhow::Result<()> {
    let config = parse_config(spec, set)?;
    write_echo(out, &config)?;
    let manifest = generate_synthetic_dataset(&config.synth, out)?;
    println!(
        "wrote {} clips over {} classes to {}",
        manifest.clips.len(),
        manifest.num_classes(),
        out.join("manifest.json").display()
    );
    Ok(())
}

fn train(config: &ConfigArgs, data: &Path, val: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let config = config.load()?;
    write_echo(out, &config)?;
    let train_set = DatasetManifest::load(data).context("loading training manifest")?;
    let val_set = val
        .map(|p| DatasetManifest::load(p).context("loading validation manifest"))
        .transpose()?;

    let mut rng = Rng::seed_from_u64(config.train.seed);
    let mut model =
        Recognizer::build_with_dropout(config.backbone.clone(), config.train.dropout_rate, &mut rng)?;
    let mut centers = init_class_centers(train_set.num_classes(), &mut rng);

    let outcome = fit(
        &mut model,
        &mut centers,
        &train_set,
        val_set.as_ref(),
        &config.train,
        &config.norm,
        Some(out),
    )?;
    println!(
        "finished after {} epochs ({:?}); best val top-1 {}",
        outcome.history.len(),
        outcome.reason,
        outcome
            .best_val_top1
            .map(|v| format!("{v:.4} at epoch {}", outcome.best_epoch.unwrap()))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(())
}

fn run_evaluate(config: &ConfigArgs, checkpoint: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let config = config.load()?;
    let state = load_checkpoint(checkpoint).context("loading checkpoint")?;
    let manifest = DatasetManifest::load(data).context("loading manifest")?;
    let report = evaluate(&state.model, &state.centers, &manifest, &state.input_norm, config.eval.top1)?;

    #[derive(serde::Serialize)]
    struct ReportDoc<'a> {
        report: &'a signstream::eval::MetricsReport,
        checkpoint: String,
        data: String,
        config: &'a RunConfig,
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let doc = ReportDoc {
        report: &report,
        checkpoint: checkpoint.display().to_string(),
        data: data.display().to_string(),
        config: &config,
    };
    std::fs::write(out, serde_json::to_string_pretty(&doc)?)?;
    println!(
        "top-1 {:.4} ({:?}) plain {:.4} mAP {:.4} over {} samples -> {}",
        report.top1,
        report.top1_mode,
        report.top1_plain,
        report.map,
        report.num_samples,
        out.display()
    );
    Ok(())
}

fn parse_boxes(path: &Path) -> anyhow::Result<Vec<BoundingBox>> {
    let text = std::fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .with_context(|| format!("box line {}", i + 1))?;
        if vals.len() != 4 {
            bail!("box line {}: expected 4 numbers, got {}", i + 1, vals.len());
        }
        boxes.push(BoundingBox { x0: vals[0], y0: vals[1], x1: vals[2], y1: vals[3] });
    }
    Ok(boxes)
}

fn infer(
    config: &ConfigArgs,
    checkpoint: &Path,
    frames_dir: &Path,
    boxes: &Path,
    out: Option<&Path>,
    data: Option<&Path>,
) -> anyhow::Result<()> {
    let config = config.load()?;
    let state = load_checkpoint(checkpoint).context("loading checkpoint")?;
    let frames = read_png_dir(frames_dir).context("reading frames")?;
    let boxes = parse_boxes(boxes)?;
    if boxes.len() != frames.dim().0 {
        bail!("{} boxes for {} frames", boxes.len(), frames.dim().0);
    }
    let class_names = data
        .map(|p| DatasetManifest::load(p))
        .transpose()?
        .map(|m| m.classes);

    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut stream = StreamState::new(&state.model, &state.centers, state.input_norm, config.stream.threshold);
    for (i, bbox) in boxes.iter().enumerate() {
        let frame = frames.index_axis(Axis(0), i).to_owned();
        match stream.push_frame(frame, *bbox) {
            Ok(Some(pred)) => {
                let token = match pred.class {
                    Some(c) => match &class_names {
                        Some(names) => names[c].clone(),
                        None => c.to_string(),
                    },
                    None => "-".into(),
                };
                writeln!(sink, "{i}\t{token}\t{:.4}", pred.confidence)?;
            }
            Ok(None) => {}
            Err(e) => eprintln!("frame {i} rejected: {e}"),
        }
    }
    Ok(())
}

fn inspect(checkpoint: &Path) -> anyhow::Result<()> {
    let mut state = load_checkpoint(checkpoint).context("loading checkpoint")?;
    let stats = state.model.backbone.model_stats()?;
    let (c, t, h, w) = state.model.in_shape();
    let (fc, ft, fh, fw) = state.model.backbone.out_shape()?;
    println!("checkpoint: {}", checkpoint.display());
    println!("epoch: {}", state.epoch);
    println!("classes: {}", state.centers.num_classes());
    println!("input: {c}x{t}x{h}x{w}");
    println!("features: {fc}x{ft}x{fh}x{fw}");
    println!("width multiplier: {}", state.model.config().width_multiplier);
    println!("backbone params: {}", stats.params);
    println!("backbone flops: {}", stats.flops);
    println!("trainable params: {}", state.model.param_count() + state.centers.w.count());
    Ok(())
}
