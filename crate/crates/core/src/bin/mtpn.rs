//! Command-line entry point: analyze, synth, train, eval, infer, bench.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mtpn::analyzer::{compare_models, count_flops};
use mtpn::losses::LossWeights;
use mtpn::metrics::{compute_map, compute_miou, MapResult};
use mtpn::network::{BackboneKind, Model, ModelConfig};
use mtpn::runtime::{
    atomic_write, benchmark, infer, load_checkpoint, read_ppm, render_overlay, save_checkpoint,
    bench::DEFAULT_RESOLUTIONS,
};
use mtpn::training::{
    load_dataset, save_sample, synth_sample, train, Difficulty, Optimizer, ParamGroup, Phase,
    TrainSchedule,
};
use mtpn::{Error, Result};

#[derive(Parser)]
#[command(name = "mtpn", version, about = "Multi-task road perception toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in '{s}'"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in '{s}'"))?;
    Ok((h, w))
}

#[derive(Subcommand)]
enum Command {
    /// Print the analytic params/MACs/FLOPs report for one backbone
    Analyze {
        #[arg(long)]
        backbone: BackboneKind,
        /// Input resolution as HxW, e.g. 384x640
        #[arg(long, value_parser = parse_resolution)]
        resolution: (usize, usize),
        /// Also print a comparison row against the other backbone
        #[arg(long)]
        compare: bool,
        /// Write the full report as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a deterministic synthetic dataset
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_resolution)]
        resolution: (usize, usize),
        #[arg(long, default_value = "medium")]
        difficulty: Difficulty,
        /// Output directory (created if missing); writes NNNNNN.mts plus a
        /// .ppm preview per sample
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory per a TOML run config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Write the per-epoch log as text
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory (mAP, recall, mIoU)
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.5)]
        nms: f64,
    },
    /// Run a checkpoint on one P6 image and write the overlay
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.5)]
        nms: f64,
    },
    /// Batch-1 latency sweep over the standard resolutions
    Bench(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Freshly initialized backbone to measure
    #[arg(long, conflicts_with = "ckpt")]
    backbone: Option<BackboneKind>,
    /// Checkpoint to measure instead of a fresh model
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Recorded in the report; the engine itself is single-threaded
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Extra HxW resolutions instead of the standard four
    #[arg(long, value_parser = parse_resolution)]
    resolution: Vec<(usize, usize)>,
    /// Include box decoding and NMS in the timed region
    #[arg(long)]
    post: bool,
    /// Write the report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

/// TOML run configuration. Unknown keys anywhere are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    loss: LossSection,
    train: TrainSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LossSection {
    alpha: f64,
    beta: f64,
    fg_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { alpha: 1.0, beta: 1.0, fg_weight: 1.0 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PhaseSection {
    epochs: usize,
    frozen: Vec<String>,
}

impl Default for PhaseSection {
    fn default() -> Self {
        PhaseSection { epochs: 1, frozen: vec![] }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    phases: Vec<PhaseSection>,
    optimizer: String,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            phases: vec![PhaseSection::default()],
            optimizer: "adam".into(),
            learning_rate: 1e-3,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl RunConfig {
    fn schedule(&self) -> Result<TrainSchedule> {
        let phases = self
            .train
            .phases
            .iter()
            .map(|p| {
                let frozen = p
                    .frozen
                    .iter()
                    .map(|s| s.parse::<ParamGroup>())
                    .collect::<Result<Vec<_>>>()?;
                Ok(Phase { epochs: p.epochs, frozen })
            })
            .collect::<Result<Vec<_>>>()?;
        let schedule = TrainSchedule {
            phases,
            optimizer: self.train.optimizer.parse::<Optimizer>()?,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

fn load_run_config(path: &PathBuf) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let rc: RunConfig =
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    rc.model.validate()?;
    Ok(rc)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze { backbone, resolution, compare, out } => {
            let config = ModelConfig::with_backbone(backbone);
            let report = count_flops(&config, resolution)?;
            if compare {
                let other = match backbone {
                    BackboneKind::Resnet50 => BackboneKind::Mobilenetv2,
                    BackboneKind::Mobilenetv2 => BackboneKind::Resnet50,
                };
                let other_report = count_flops(&ModelConfig::with_backbone(other), resolution)?;
                print!("{}", compare_models(&report, &other_report)?.to_text_table());
            } else {
                print!("{}", report.to_text_table());
            }
            if let Some(out) = out {
                let json =
                    serde_json::to_vec_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
                atomic_write(&out, &json)?;
            }
            Ok(())
        }
        Command::Synth { count, seed, resolution, difficulty, out } => {
            if count == 0 {
                return Err(Error::InvalidConfig("--count must be >= 1".into()));
            }
            std::fs::create_dir_all(&out)?;
            for i in 0..count {
                let sample = synth_sample(seed.wrapping_add(i as u64), resolution, difficulty)?;
                save_sample(&sample, &out.join(format!("{i:06}.mts")))?;
                mtpn::runtime::ppm::write_ppm(&out.join(format!("{i:06}.ppm")), &sample.image)?;
            }
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Command::Train { config, data, out, log } => {
            let rc = load_run_config(&config)?;
            let schedule = rc.schedule()?;
            let dataset = load_dataset(&data)?;
            let weights = LossWeights { alpha: rc.loss.alpha, beta: rc.loss.beta };
            let (model, train_log) =
                train(&rc.model, &schedule, &dataset, weights, rc.loss.fg_weight)?;
            save_checkpoint(&model, &out)?;
            print!("{}", train_log.to_text());
            if let Some(log) = log {
                atomic_write(&log, train_log.to_text().as_bytes())?;
            }
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Eval { ckpt, data, conf, nms } => {
            let model = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let mut preds = Vec::with_capacity(dataset.len());
            let mut gts = Vec::with_capacity(dataset.len());
            let mut miou_drivable = 0.0;
            let mut miou_lane = 0.0;
            for s in &dataset {
                let o = infer(&model, &s.image, conf, nms)?;
                miou_drivable += compute_miou(&o.drivable_mask, &s.drivable_mask)?;
                miou_lane += compute_miou(&o.lane_mask, &s.lane_mask)?;
                preds.push(o.detections);
                gts.push(s.boxes.clone());
            }
            let n = dataset.len() as f64;
            match compute_map(&preds, &gts, 0.5)? {
                MapResult::NoGroundTruth => println!("mAP@0.5: n/a (no ground-truth boxes)"),
                MapResult::Evaluated { map, recall, .. } => {
                    println!("mAP@0.5:        {map:.4}");
                    println!("recall@0.5:     {recall:.4}");
                }
            }
            println!("mIoU drivable:  {:.4}", miou_drivable / n);
            println!("mIoU lane:      {:.4}", miou_lane / n);
            Ok(())
        }
        Command::Infer { ckpt, image, out, conf, nms } => {
            let model = load_checkpoint(&ckpt)?;
            let img = read_ppm(&image)?;
            let o = infer(&model, &img, conf, nms)?;
            render_overlay(&img, &o.detections, &o.drivable_mask, &o.lane_mask, &out)?;
            println!(
                "{} detections; overlay written to {}",
                o.detections.len(),
                out.display()
            );
            Ok(())
        }
        Command::Bench(args) => {
            let model = match (&args.backbone, &args.ckpt) {
                (Some(b), None) => Model::build(ModelConfig::with_backbone(*b), 0)?,
                (None, Some(p)) => load_checkpoint(p)?,
                (None, None) => {
                    return Err(Error::InvalidConfig(
                        "bench needs --backbone or --ckpt".into(),
                    ))
                }
                (Some(_), Some(_)) => unreachable!("clap rejects the conflict"),
            };
            let resolutions: Vec<(usize, usize)> = if args.resolution.is_empty() {
                DEFAULT_RESOLUTIONS.to_vec()
            } else {
                args.resolution.clone()
            };
            let report = benchmark(
                &model,
                &resolutions,
                args.warmup,
                args.iters,
                args.threads,
                args.post,
            )?;
            print!("{}", report.to_text_table());
            if let Some(out) = args.out {
                atomic_write(&out, report.to_json()?.as_bytes())?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
