use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use soda_core::data::{build_coco, build_duts, synthetic::write_synthetic, DatasetManifest, Phase};
use soda_core::metrics::{evaluate_dirs, write_report, MetricReport};
use soda_core::model::{Ablation, Variant};
use soda_core::train::grid::{report_grid, GridRow};
use soda_core::train::predict::{list_images, predict_checkpoint};
use soda_core::train::{train, TrainPhase, TrainPlan};

#[derive(Parser)]
#[command(name = "soda", version, about = "Salient-object detection: data, training, evaluation and export")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prepare training corpora and manifests.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train a model with a phase preset, optionally overridden by a plan file.
    Train(TrainArgs),
    /// Score prediction maps against ground truth.
    Eval(EvalArgs),
    /// Export 8-bit saliency maps for a folder of images.
    Predict(PredictArgs),
    /// Compose a labelled comparison grid.
    Grid(GridArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Binarize COCO instance annotations into a pretraining corpus.
    BuildCoco {
        #[arg(long, visible_alias = "ann")]
        annotations: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair image and mask folders into a fine-tuning corpus.
    BuildDuts {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write procedural image/mask pairs and a manifest.
    Synthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "pretrain")]
        phase: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    phase: String,
    /// full, m or s; overrides the plan file.
    #[arg(long)]
    variant: Option<String>,
    /// Flat `key: value` plan file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Component-removal flags, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Manifest written by `soda data`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction folder; repeat together with --gt for several datasets.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    /// Dataset names in the same order; defaults to the ground-truth folder names.
    #[arg(long)]
    name: Vec<String>,
    /// report.json, report.md or report.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// `label=folder` of prediction PNGs; repeat per model.
    #[arg(long)]
    pred: Vec<String>,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 64)]
    tile: u32,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Data(cmd) => data(cmd),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => eval(args),
        Command::Predict(args) => {
            let s = predict_checkpoint(&args.checkpoint, &args.images, &args.out)?;
            println!("wrote {} maps to {}, skipped {}", s.written.len(), args.out.display(), s.skipped.len());
            Ok(())
        }
        Command::Grid(args) => grid(args),
    }
}

fn data(cmd: DataCommand) -> Result<()> {
    let report = match cmd {
        DataCommand::BuildCoco { annotations, images, out } => build_coco(&annotations, &images, &out)?,
        DataCommand::BuildDuts { root, out } => build_duts(&root, &out)?,
        DataCommand::Synthetic { out, count, size, seed, phase } => {
            let phase: Phase = phase.parse()?;
            let sources = write_synthetic(&out, count, size, seed)?;
            let manifest = DatasetManifest::expand(&sources, phase, "synthetic");
            let path = out.join("manifest.jsonl");
            manifest.write(&path)?;
            println!("{} sources, {} entries -> {}", sources.len(), manifest.len(), path.display());
            return Ok(());
        }
    };
    println!(
        "{} sources, {} entries, {} images skipped, {} instances skipped -> {}",
        report.sources,
        report.entries,
        report.skipped_images,
        report.skipped_instances,
        report.manifest.display()
    );
    Ok(())
}

fn build_plan(args: &TrainArgs) -> Result<TrainPlan> {
    let phase: TrainPhase = args.phase.parse()?;
    let mut plan = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainPlan::parse(&text, phase).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainPlan::preset(phase),
    };
    if plan.phase != phase {
        bail!("plan file trains {} but --phase is {phase}", plan.phase);
    }
    if let Some(v) = &args.variant {
        plan.variant = v.parse::<Variant>()?;
    }
    for a in &args.ablate {
        plan.ablations.insert(a.parse::<Ablation>()?);
    }
    plan.apply_env()?;
    plan.validate()?;
    Ok(plan)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let plan = build_plan(&args)?;
    let manifest = DatasetManifest::read(&args.manifest, plan.phase.manifest_phase())?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("plan.txt"), plan.to_text())?;
    log::info!("training {} / {} on {} entries, seed {}", plan.phase, plan.variant, manifest.len(), plan.seed);
    let record = train(&plan, manifest, &args.out, args.resume.as_deref())?;
    println!(
        "{} steps in {:.1}s; last checkpoint {}",
        record.steps.len(),
        record.wall_clock_secs,
        record.checkpoints.last().map_or_else(|| "none".into(), |p| p.display().to_string())
    );
    Ok(())
}

fn folder_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn eval(args: EvalArgs) -> Result<()> {
    if args.pred.len() != args.gt.len() {
        bail!("--pred given {} times but --gt {} times", args.pred.len(), args.gt.len());
    }
    if !args.name.is_empty() && args.name.len() != args.gt.len() {
        bail!("--name must be given once per dataset");
    }
    let reports: Vec<MetricReport> = args
        .pred
        .iter()
        .zip(&args.gt)
        .enumerate()
        .map(|(i, (pred, gt))| {
            let name = args.name.get(i).cloned().unwrap_or_else(|| folder_name(gt));
            evaluate_dirs(pred, gt, &name).with_context(|| format!("evaluating {name}"))
        })
        .collect::<Result<_>>()?;
    write_report(&reports, &args.out)?;
    print!("{}", soda_core::metrics::report::to_markdown(&reports));
    Ok(())
}

fn find_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"].iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

fn grid(args: GridArgs) -> Result<()> {
    let preds: Vec<(String, PathBuf)> = args
        .pred
        .iter()
        .map(|s| match s.split_once('=') {
            Some((label, dir)) => Ok((label.to_string(), PathBuf::from(dir))),
            None => bail!("--pred expects label=folder, got `{s}`"),
        })
        .collect::<Result<_>>()?;
    let mut labels = vec!["Image".to_string(), "GT".to_string()];
    labels.extend(preds.iter().map(|(l, _)| l.clone()));
    let rows: Vec<GridRow> = list_images(&args.images)?
        .into_iter()
        .take(args.rows)
        .map(|img| {
            let stem = img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut cells = vec![Some(img), find_stem(&args.gt, &stem)];
            cells.extend(preds.iter().map(|(_, dir)| find_stem(dir, &stem)));
            GridRow { cells }
        })
        .collect();
    let s = report_grid(&rows, &labels, args.tile, &args.out)?;
    println!("{}x{} grid, {} placeholders -> {}", s.width, s.height, s.placeholders, args.out.display());
    Ok(())
}
