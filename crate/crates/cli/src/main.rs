//! `mtnet` — one executable for the full crown-detection pipeline:
//! synthesize datasets, train, infer, detect, evaluate, and count parameters.
//!
//! Every numeric setting can come from a flag or a `key=value` config file
//! (flags win), every run writes a `run.json` provenance record next to its
//! outputs, and all randomness flows from a single `--seed`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtnet_core::detection::{DetectMode, DETECT_THRESHOLD, MIN_COMPONENT_SIZE};
use mtnet_core::training::TrainConfig;
use mtnet_core::{Error, Result};

use commands::{
    run_detect, run_eval, run_infer, run_params, run_synth, run_train, DetectSettings,
    EvalSettings, InferSettings, SynthSettings, TrainSettings,
};
use config::FileConfig;

#[derive(Parser)]
#[command(name = "mtnet", version, about = "Mango tree crown segmentation and detection pipeline")]
struct Cli {
    /// Worker threads for data-parallel sections (0 = one per CPU). Results
    /// are deterministic at any count; 1 is the documented reference setting.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the trainable-parameter count of an architecture
    Params {
        /// arch1, arch2, arch3, or mango_tree_net
        #[arg(long)]
        arch: String,
        /// 2 or 3 (the 3-class head exists only for mango_tree_net)
        #[arg(long, default_value_t = 2)]
        classes: u8,
    },
    /// Generate a synthetic orchard dataset (scenes, ground truth, manifest, boxes)
    Synth(SynthArgs),
    /// Train a model on a synthesized dataset directory
    Train(TrainArgs),
    /// Run one image through a trained model; write class map and heat maps
    Infer(InferArgs),
    /// Detect crowns in one image; write a box CSV and a component map
    Detect(DetectArgs),
    /// Score predictions against ground truth (pixel or tree level)
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the dataset
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of scenes [default: 6]
    #[arg(long)]
    scenes: Option<usize>,
    /// Scene size as HxW [default: 480x480]
    #[arg(long)]
    size: Option<String>,
    /// Isolated crowns per scene [default: 2]
    #[arg(long)]
    crowns: Option<usize>,
    /// Touching crown pairs per scene [default: 1]
    #[arg(long)]
    pairs: Option<usize>,
    /// Distractor vegetation blobs per scene [default: 2]
    #[arg(long)]
    distractors: Option<usize>,
    /// Minimum crown radius in pixels [default: 16]
    #[arg(long)]
    radius_min: Option<f64>,
    /// Maximum crown radius in pixels [default: 26]
    #[arg(long)]
    radius_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding manifest.txt (as written by `synth`)
    #[arg(long)]
    data: PathBuf,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// arch1, arch2, arch3, or mango_tree_net [default: mango_tree_net]
    #[arg(long)]
    arch: Option<String>,
    /// 2 or 3 [default: 2]
    #[arg(long)]
    classes: Option<u8>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// 3-class loss weights as mango,boundary,background [default: 1,60,1]
    #[arg(long)]
    class_weights: Option<String>,
    /// Patch side length for tiling scenes [default: 240]
    #[arg(long)]
    patch: Option<usize>,
    /// Train the batch-norm-free variant
    #[arg(long)]
    no_batchnorm: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input PPM image (dimensions must suit the model's pooling depth)
    #[arg(long)]
    image: PathBuf,
    /// Prefix for `<prefix>_map.pgm`, `<prefix>_heat_*.pgm`, `<prefix>_run.json`
    #[arg(long)]
    out_prefix: PathBuf,
    /// 2-class mango threshold [default: 0.6]
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Prefix for `<prefix>_boxes.csv`, `<prefix>_detected.pgm`, `<prefix>_run.json`
    #[arg(long)]
    out_prefix: PathBuf,
    /// two_class or three_class; must match the model's head
    #[arg(long)]
    mode: String,
    /// Optional key=value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// 2-class mango threshold [default: 0.6]
    #[arg(long)]
    tau: Option<f64>,
    /// Discard components smaller than this many pixels [default: 600]
    #[arg(long)]
    min_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// pixel (class-map PGM vs annotated PPM) or tree (boxes CSV vs boxes CSV)
    #[arg(long)]
    mode: String,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Output metrics CSV
    #[arg(long)]
    out: PathBuf,
    /// Minimum IoU for a detection to claim a truth box [default: 0.5]
    #[arg(long)]
    iou_min: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            eprintln!("error: could not configure {} workers: {e}", cli.workers);
            return ExitCode::FAILURE;
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::Params { arch, classes } => run_params(&arch, classes),
        Command::Synth(a) => {
            const KEYS: &[&str] = &[
                "scenes", "size", "crowns", "pairs", "distractors", "radius_min", "radius_max",
                "seed",
            ];
            let f = FileConfig::load(a.config.as_deref(), KEYS)?;
            let size = f.resolve(a.size, "size", "480x480".to_string())?;
            let (height, width) = parse_size(&size)?;
            run_synth(&SynthSettings {
                out: a.out,
                scenes: f.resolve(a.scenes, "scenes", 6)?,
                height,
                width,
                crowns: f.resolve(a.crowns, "crowns", 2)?,
                overlap_pairs: f.resolve(a.pairs, "pairs", 1)?,
                distractors: f.resolve(a.distractors, "distractors", 2)?,
                radius_min: f.resolve(a.radius_min, "radius_min", 16.0)?,
                radius_max: f.resolve(a.radius_max, "radius_max", 26.0)?,
                seed: f.resolve(a.seed, "seed", 0)?,
            })
        }
        Command::Train(a) => {
            const KEYS: &[&str] = &[
                "arch", "classes", "epochs", "batch_size", "learning_rate", "class_weights",
                "patch", "seed",
            ];
            let f = FileConfig::load(a.config.as_deref(), KEYS)?;
            let classes = f.resolve(a.classes, "classes", 2)?;
            let mut config = TrainConfig::new(classes);
            config.epochs = f.resolve(a.epochs, "epochs", 40)?;
            config.batch_size = f.resolve(a.batch_size, "batch_size", config.batch_size)?;
            config.learning_rate =
                f.resolve(a.learning_rate, "learning_rate", config.learning_rate)?;
            config.seed = f.resolve(a.seed, "seed", 0)?;
            let weights = f.resolve(a.class_weights, "class_weights", "1,60,1".to_string())?;
            config.class_weights = parse_weights(&weights)?;
            run_train(&TrainSettings {
                data: a.data,
                out: a.out,
                arch: f.resolve(a.arch, "arch", "mango_tree_net".to_string())?,
                classes,
                config,
                no_batchnorm: a.no_batchnorm,
                patch: f.resolve(a.patch, "patch", 240)?,
                workers,
            })
        }
        Command::Infer(a) => {
            let tau = a.tau.unwrap_or(DETECT_THRESHOLD);
            check_unit_interval("tau", tau)?;
            run_infer(&InferSettings {
                model: a.model,
                image: a.image,
                out_prefix: a.out_prefix,
                tau,
                workers,
            })
        }
        Command::Detect(a) => {
            const KEYS: &[&str] = &["tau", "min_size"];
            let f = FileConfig::load(a.config.as_deref(), KEYS)?;
            let tau = f.resolve(a.tau, "tau", DETECT_THRESHOLD)?;
            check_unit_interval("tau", tau)?;
            run_detect(&DetectSettings {
                model: a.model,
                image: a.image,
                out_prefix: a.out_prefix,
                mode: DetectMode::parse(&a.mode)?,
                tau,
                min_size: f.resolve(a.min_size, "min_size", MIN_COMPONENT_SIZE)?,
                workers,
            })
        }
        Command::Eval(a) => {
            let iou_min = a.iou_min.unwrap_or(0.5);
            check_unit_interval("iou_min", iou_min)?;
            let settings = match a.mode.as_str() {
                "pixel" => EvalSettings::Pixel { pred: a.pred, truth: a.truth, out: a.out },
                "tree" => EvalSettings::Tree { pred: a.pred, truth: a.truth, iou_min, out: a.out },
                other => {
                    return Err(Error::invalid(
                        "eval",
                        format!("unknown mode {other:?}; use pixel or tree"),
                    ))
                }
            };
            run_eval(&settings)
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parsed = s
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)));
    parsed.ok_or_else(|| Error::invalid("synth", format!("size must look like 480x480, got {s:?}")))
}

fn parse_weights(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid("train", format!("class_weights {s:?}: {e}")))?;
    if parts.len() != 3 {
        return Err(Error::invalid(
            "train",
            format!("class_weights needs 3 comma-separated values, got {}", parts.len()),
        ));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn check_unit_interval(name: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument {
            op: name,
            detail: format!("{v} is outside [0, 1]"),
        });
    }
    Ok(())
}
