//! Command-line entry points: train, infer, eval, check.
//!
//! Exit codes: 0 success, 1 check/eval failure, 2 usage error, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use skipdepth::check::{all_passed, render_report, run_checks, CheckLevel};
use skipdepth::config::RunConfig;
use skipdepth::data::checkpoint::load_checkpoint;
use skipdepth::data::formats::{read_image_rgb, write_depth, DepthFormat};
use skipdepth::decoder::FusionMode;
use skipdepth::error::Error;
use skipdepth::eval::evaluate_files;
use skipdepth::infer::infer_depth;
use skipdepth::metrics::CropRect;
use skipdepth::scalar::Precision;
use skipdepth::train::run_training;

#[derive(Parser)]
#[command(name = "skipdepth", version, about = "Monocular depth estimation with attention-based skip fusion and adaptive depth bins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on synthetic scenes or a dataset list.
    Train(TrainArgs),
    /// Predict depth maps for images using a trained checkpoint.
    Infer(InferArgs),
    /// Score stored predictions against ground truth.
    Eval(EvalArgs),
    /// Run the numerical self-verification suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (TOML); defaults to the toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset to start from when no config file is given.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run precision.
    #[arg(long, default_value = "f32")]
    precision: Precision,
    /// Override the fusion mode (sam, add_conv, cat_conv).
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the checkpoint path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Images to predict depth for.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Output directory for depth maps.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Depth file format.
    #[arg(long, default_value = "pfm")]
    format: DepthFormat,
    /// Average the prediction with the prediction on the mirrored image.
    #[arg(long)]
    flip_average: bool,
    /// Run precision.
    #[arg(long, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding predictions named <id>.pfm or <id>.png.
    pred_dir: PathBuf,
    /// Ground-truth list file: one "image_path depth_path" per line.
    gt_list: PathBuf,
    /// Evaluation crop as top,left,height,width.
    #[arg(long)]
    crop: Option<CropRect>,
    #[arg(long, default_value_t = 1e-3)]
    d_min: f64,
    #[arg(long, default_value_t = 10.0)]
    d_max: f64,
}

#[derive(Args)]
struct CheckArgs {
    /// fast: invariant suites; full: adds gradient validation (f64).
    #[arg(long, default_value = "fast")]
    level: CheckLevel,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> skipdepth::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Check(args) => cmd_check(args),
    }
}

fn cmd_train(args: TrainArgs) -> skipdepth::Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&args.preset)?,
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(fusion) = args.fusion {
        cfg.model.fusion = fusion;
    }
    if let Some(out) = &args.out {
        cfg.io.out_dir = out.display().to_string();
    }
    if let Some(ckpt) = &args.checkpoint {
        cfg.io.checkpoint = ckpt.display().to_string();
    }
    cfg.validate()?;

    println!(
        "training: {} steps, batch {}, fusion {}, seed {}, precision {}",
        cfg.train.steps,
        cfg.train.batch_size,
        cfg.model.fusion.name(),
        cfg.train.seed,
        args.precision.name()
    );
    let (first, last, ckpt) = match args.precision {
        Precision::F32 => {
            let out = run_training::<f32>(&cfg, args.precision)?;
            for line in &out.log_lines {
                println!("{line}");
            }
            (out.log_lines.first().cloned(), out.log_lines.last().cloned(), out.checkpoint)
        }
        Precision::F64 => {
            let out = run_training::<f64>(&cfg, args.precision)?;
            for line in &out.log_lines {
                println!("{line}");
            }
            (out.log_lines.first().cloned(), out.log_lines.last().cloned(), out.checkpoint)
        }
    };
    if let (Some(first), Some(last)) = (first, last) {
        println!("first: {first}");
        println!("last:  {last}");
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(args: InferArgs) -> skipdepth::Result<ExitCode> {
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    match args.precision {
        Precision::F32 => infer_all::<f32>(&args),
        Precision::F64 => infer_all::<f64>(&args),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn infer_all<T: skipdepth::Scalar>(args: &InferArgs) -> skipdepth::Result<()> {
    let (model, _) = load_checkpoint::<T>(&args.checkpoint)?;
    for image_path in &args.images {
        let (h, w, image) = read_image_rgb(image_path)?;
        let depth = infer_depth(&model, &image, h, w, args.flip_average)?;
        let stem = skipdepth::data::sample_id(image_path);
        let out_path = args.out.join(format!("{stem}.{}", args.format.extension()));
        write_depth(&out_path, &depth, h, w, args.format)?;
        println!("{} -> {}", image_path.display(), out_path.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> skipdepth::Result<ExitCode> {
    let outcome = evaluate_files(&args.pred_dir, &args.gt_list, args.crop, args.d_min, args.d_max)?;
    print!("{}", outcome.render());
    Ok(if outcome.all_ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_check(args: CheckArgs) -> skipdepth::Result<ExitCode> {
    let results = run_checks(args.level, false);
    print!("{}", render_report(&results));
    Ok(if all_passed(&results) { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
