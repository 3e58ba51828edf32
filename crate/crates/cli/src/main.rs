//! Command-line front end: augment a dataset, train the denoising model,
//! compare class distributions, and generate synthetic inputs for demos.
//!
//! `augment` reads its settings from an optional TOML or JSON config file
//! whose keys mirror the flags one-to-one; any flag given on the command
//! line overrides the file. Unknown config keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use raremix_core::dataset::{
    distribution_report, load_dataset, save_dataset, save_rgb, write_report,
};
use raremix_core::diffusion::{
    build_schedule, save_checkpoint, tensor_to_raster, train, SmallUnet, DEFAULT_BETA_END,
    DEFAULT_BETA_START, DEFAULT_TIMESTEPS,
};
use raremix_core::pipeline::{self, InpainterChoice, PipelineConfig};
use raremix_core::rng::{child_rng, child_seed};
use raremix_core::synthetic::{gen_textures, gen_toy_dataset, ToyDatasetSpec};
use raremix_core::AugmentationReport;

#[derive(Parser)]
#[command(
    name = "raremix",
    version,
    about = "Rebalance instance-mask datasets by copying rare nuclei into context-similar locations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

// The argument structs must appear unboxed for clap's derive to accept them,
// and the enum lives only briefly on main's stack.
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand)]
enum Command {
    /// Insert rare nuclei into a dataset and write the augmented copy
    Augment(AugmentArgs),
    /// Train the denoising model on a directory of texture images
    TrainDiffusion(TrainArgs),
    /// Compare the class distributions of two datasets
    Report(ReportArgs),
    /// Write a small synthetic dataset for demos and smoke tests
    GenToy(GenToyArgs),
    /// Write synthetic texture images for training demos
    GenTextures(GenTexturesArgs),
}

#[derive(Args)]
struct AugmentArgs {
    /// Config file (TOML, or JSON with a .json extension); flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input dataset root (images/, labels/, classes.json)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output dataset root
    #[arg(long)]
    out: Option<PathBuf>,
    /// Insertion operations to attempt
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated classes forced rare (replaces the frequency rule)
    #[arg(long, value_delimiter = ',', conflicts_with = "rare_threshold")]
    rare_classes: Option<Vec<String>>,
    /// Frequency below which a class counts as rare, in [0, 1]
    #[arg(long)]
    rare_threshold: Option<f64>,
    /// Comma-separated classes that may only paste onto background
    #[arg(long, value_delimiter = ',')]
    paste_only: Option<Vec<String>>,
    /// Blending backend: classical or diffusion
    #[arg(long)]
    inpainter: Option<InpainterChoice>,
    /// Trained-model file (required with --inpainter diffusion)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Denoising steps per fill
    #[arg(long)]
    ddim_steps: Option<usize>,
    /// Strength of the observation-matching gradient
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra copy of the report outside the output dataset
    #[arg(long)]
    report: Option<PathBuf>,
    /// Working-window side length in pixels
    #[arg(long)]
    patch_size: Option<usize>,
    /// Side of the square erased from context patches before embedding
    #[arg(long)]
    center_size: Option<usize>,
    /// Reduced feature dimension
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Fraction of image pixels drawn as background candidates
    #[arg(long)]
    background_rate: Option<f64>,
    /// Instance-free radius required around a background location
    #[arg(long)]
    clearance_radius: Option<usize>,
    /// Foreign-instance pixels an insertion footprint may cover
    #[arg(long)]
    overlap_tol: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of RGB PNG textures with even side lengths
    #[arg(long)]
    textures: PathBuf,
    /// Optimization steps
    #[arg(long)]
    steps: usize,
    /// Checkpoint output file; the loss curve goes to <out>.loss.csv
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Length of the noising schedule
    #[arg(long, default_value_t = DEFAULT_TIMESTEPS)]
    timesteps: usize,
    #[arg(long, default_value_t = DEFAULT_BETA_START)]
    beta_start: f64,
    #[arg(long, default_value_t = DEFAULT_BETA_END)]
    beta_end: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Original dataset root
    #[arg(long)]
    before: PathBuf,
    /// Augmented dataset root
    #[arg(long)]
    after: PathBuf,
    /// Write the recount as JSON in addition to the stdout table
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenToyArgs {
    /// Output dataset root
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    images: usize,
    /// Square image side; must be a multiple of 16
    #[arg(long, default_value_t = 96)]
    side: usize,
    /// Major nuclei per image
    #[arg(long, default_value_t = 20)]
    majors: usize,
    /// Rare nuclei per image
    #[arg(long, default_value_t = 1)]
    rares: usize,
}

#[derive(Args)]
struct GenTexturesArgs {
    /// Output directory for texture_NNN.png files
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Square texture side; must be even
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Augment(args) => augment(args),
        Command::TrainDiffusion(args) => train_diffusion(args),
        Command::Report(args) => report(args),
        Command::GenToy(args) => gen_toy(args),
        Command::GenTextures(args) => gen_texture_files(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let parsed = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(parsed)
}

/// Merge CLI flags over the config file (or the defaults when no file is
/// given). A flag that was not passed leaves the config value alone.
fn merge_config(args: AugmentArgs) -> Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    macro_rules! overlay {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    overlay!(args.data => config.data_dir);
    overlay!(args.out => config.out_dir);
    overlay!(args.k => config.k);
    overlay!(args.rare_classes => config.rare_classes);
    overlay!(args.rare_threshold => config.rare_threshold);
    overlay!(args.paste_only => config.paste_only);
    overlay!(args.inpainter => config.inpainter);
    overlay!(args.checkpoint.map(Some) => config.checkpoint);
    overlay!(args.ddim_steps => config.ddim_steps);
    overlay!(args.guidance_scale => config.guidance_scale);
    overlay!(args.seed => config.seed);
    overlay!(args.report.map(Some) => config.report);
    overlay!(args.patch_size => config.patch_size);
    overlay!(args.center_size => config.center_size);
    overlay!(args.pca_dim => config.pca_dim);
    overlay!(args.background_rate => config.background_rate);
    overlay!(args.clearance_radius => config.clearance_radius);
    overlay!(args.overlap_tol => config.overlap_tol);
    Ok(config)
}

fn print_counts(report: &AugmentationReport) {
    println!("class counts (before -> after):");
    for (class, &before) in &report.class_counts_before {
        let after = *report.class_counts_after.get(class).unwrap_or(&0);
        let delta = after as i64 - before as i64;
        println!("  {class}: {before} -> {after} ({delta:+})");
    }
}

fn augment(args: AugmentArgs) -> Result<()> {
    let config = merge_config(args)?;
    let report = pipeline::run(&config).context("augmentation failed")?;
    println!(
        "{} of {} ops succeeded ({} replace, {} paste), {} failed",
        report.ops_succeeded,
        report.ops_attempted,
        report.replace_count,
        report.paste_count,
        report.ops_failed
    );
    print_counts(&report);
    println!("augmented dataset written to {}", config.out_dir.display());
    Ok(())
}

fn train_diffusion(args: TrainArgs) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.textures)
        .with_context(|| format!("reading texture dir {}", args.textures.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    entries.sort();
    ensure!(
        !entries.is_empty(),
        "no .png textures in {}",
        args.textures.display()
    );
    let mut textures = Vec::with_capacity(entries.len());
    for path in &entries {
        let raster = raremix_core::dataset::load_rgb(path)?;
        textures.push(raremix_core::diffusion::raster_to_tensor(&raster));
    }
    log::info!("training on {} textures", textures.len());

    let schedule = build_schedule(args.timesteps, args.beta_start, args.beta_end)?;
    let mut model = SmallUnet::new(child_seed(args.seed, "model-init", 0));
    let mut rng = child_rng(args.seed, "train", 0);
    let curve = train(
        &mut model,
        &schedule,
        &textures,
        args.steps,
        args.lr,
        args.batch_size,
        &mut rng,
    )?;

    save_checkpoint(&args.out, &model, &schedule)?;
    let mut csv_path = args.out.clone().into_os_string();
    csv_path.push(".loss.csv");
    let csv_path = PathBuf::from(csv_path);
    let mut csv = String::from("step,loss\n");
    for (i, loss) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{loss}\n", i + 1));
    }
    std::fs::write(&csv_path, csv)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!("loss {first:.3} -> {last:.3} over {} steps", curve.len());
    }
    println!(
        "checkpoint written to {}, loss curve to {}",
        args.out.display(),
        csv_path.display()
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let before = load_dataset(&args.before)?;
    let after = load_dataset(&args.after)?;
    let recount = distribution_report(&before, &after)?;
    print_counts(&recount);
    if let Some(path) = &args.out {
        write_report(&recount, path)?;
        println!("recount written to {}", path.display());
    }
    Ok(())
}

fn gen_toy(args: GenToyArgs) -> Result<()> {
    ensure!(
        args.side >= 16 && args.side.is_multiple_of(16),
        "--side must be a multiple of 16, got {}",
        args.side
    );
    let cells = (args.side / 16) * (args.side / 16);
    ensure!(
        args.majors + args.rares <= cells,
        "an image of side {} holds at most {} instances on its 16-px grid, got {}",
        args.side,
        cells,
        args.majors + args.rares
    );
    let spec = ToyDatasetSpec {
        n_images: args.images,
        side: args.side,
        majors_per_image: args.majors,
        rares_per_image: args.rares,
    };
    let ds = gen_toy_dataset(&spec, args.seed);
    save_dataset(&ds, &args.out)?;
    println!(
        "wrote {} images with {} instances each to {}",
        args.images,
        args.majors + args.rares,
        args.out.display()
    );
    Ok(())
}

fn gen_texture_files(args: GenTexturesArgs) -> Result<()> {
    ensure!(
        args.side.is_multiple_of(2),
        "--side must be even, got {}",
        args.side
    );
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for (i, tensor) in gen_textures(args.count, args.side, args.seed).iter().enumerate() {
        let path = args.out.join(format!("texture_{i:03}.png"));
        save_rgb(&path, &tensor_to_raster(tensor))?;
    }
    println!("wrote {} textures to {}", args.count, args.out.display());
    Ok(())
}
