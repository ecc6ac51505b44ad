//! Command-line front end: training, single-image super-resolution,
//! dataset evaluation, classification statistics, gain analysis, and the
//! threshold / rolling / stage-depth ablations.
//!
//! Every subcommand accepts `--config <file.toml>`; keys in the file
//! override the corresponding flags.

mod overrides;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use prn_core::evalbench::{
    ablate_rolling, ablate_stage_depth, ablate_thresholds, depth_rows_csv, evaluate_dataset,
    gain_analysis, load_image_dir, reference_threshold_grid, threshold_rows_csv, AblationRecipe,
    GainReport,
};
use prn_core::imagepipe::{load_image, rgb_to_ycbcr, save_image, ColorSpace, ImagePlane};
use prn_core::prior::{classify, gradient_prior, histogram_of, Thresholds};
use prn_core::prnet::{load_checkpoint, save_checkpoint, super_resolve_image, ModelConfig, PrnModel};
use prn_core::training::{make_training_pairs, train, Optimizer, TrainConfig};

use overrides::ConfigOverrides;

#[derive(Parser)]
#[command(
    name = "prn",
    version,
    about = "Content-adaptive super-resolution: gradient-prior routing over a rolled filter bank"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of HR images.
    Train(TrainArgs),
    /// Super-resolve one image with a trained checkpoint.
    Sr(SrArgs),
    /// Evaluate a checkpoint over a directory of HR images.
    Eval(EvalArgs),
    /// Per-image difficulty-tag counts and the prior histogram.
    ClassifyStats(ClassifyStatsArgs),
    /// Split patches by PSNR gain over bicubic and report prior stats.
    GainAnalysis(GainArgs),
    /// Sweep routing thresholds over a grid; PSNR/MAC trade-off CSV.
    AblateThresholds(AblateThresholdsArgs),
    /// Train and evaluate twin configs with rolling on and off.
    AblateRolling(AblateRollingArgs),
    /// Train and evaluate a grid of early/mid stage depths.
    AblateDepth(AblateDepthArgs),
}

/// Flags shared by every training-style run.
#[derive(Args, Clone)]
struct TrainOpts {
    /// Directory of HR training images (png/ppm/pgm).
    #[arg(long)]
    train_dir: PathBuf,
    /// Scale factors to train, e.g. 3 or 2,3.
    #[arg(long, value_delimiter = ',', default_value = "3")]
    scales: Vec<usize>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    /// Divide lr by 10 every N epochs (0 disables).
    #[arg(long, default_value_t = 300)]
    lr_decay_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_optimizer, default_value = "adam")]
    optimizer: Optimizer,
    #[arg(long, default_value_t = 10.0)]
    gamma_upper: f32,
    #[arg(long, default_value_t = 30.0)]
    gamma_low: f32,
    /// HR patch edge (rounded up per scale for divisibility).
    #[arg(long, default_value_t = 54)]
    patch_size: usize,
    /// Dilation rate of the rolled banks.
    #[arg(long, default_value_t = 2)]
    dilation_rate: usize,
    #[arg(long, default_value_t = 1)]
    depth_early: usize,
    #[arg(long, default_value_t = 2)]
    depth_mid: usize,
    /// Disable the rolling strategy (shared regular banks).
    #[arg(long, default_value_t = false)]
    no_rolling: bool,
    /// Global-norm gradient clip (omit to disable).
    #[arg(long)]
    grad_clip: Option<f32>,
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    match s.to_ascii_lowercase().as_str() {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::Adam),
        other => Err(format!("unknown optimizer '{other}' (sgd|adam)")),
    }
}

impl TrainOpts {
    fn thresholds(&self) -> Result<Thresholds> {
        Ok(Thresholds::new(self.gamma_upper, self.gamma_low)?)
    }

    fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            scales: self.scales.clone(),
            thresholds: self.thresholds()?,
            dilation_rate: self.dilation_rate,
            depth_early: self.depth_early,
            depth_mid: self.depth_mid,
            rolling: !self.no_rolling,
            base_patch: self.patch_size,
        })
    }

    fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay_epochs: self.lr_decay_epochs,
            epochs: self.epochs,
            scales: self.scales.clone(),
            seed: self.seed,
            optimizer: self.optimizer,
            thresholds: self.thresholds()?,
            patch_size: self.patch_size,
            grad_clip: self.grad_clip,
            tag_weights: [1.0; 3],
        })
    }

    fn apply(&mut self, cfg: &ConfigOverrides) {
        cfg.path("train_dir", &mut self.train_dir);
        cfg.usize_list("scales", &mut self.scales);
        cfg.usize("epochs", &mut self.epochs);
        cfg.usize("batch_size", &mut self.batch_size);
        cfg.f32("lr", &mut self.lr);
        cfg.usize("lr_decay_epochs", &mut self.lr_decay_epochs);
        cfg.u64("seed", &mut self.seed);
        if let Some(s) = cfg.string("optimizer") {
            if let Ok(o) = parse_optimizer(&s) {
                self.optimizer = o;
            }
        }
        cfg.f32("gamma_upper", &mut self.gamma_upper);
        cfg.f32("gamma_low", &mut self.gamma_low);
        cfg.usize("patch_size", &mut self.patch_size);
        cfg.usize("dilation_rate", &mut self.dilation_rate);
        cfg.usize("depth_early", &mut self.depth_early);
        cfg.usize("depth_mid", &mut self.depth_mid);
        cfg.bool("no_rolling", &mut self.no_rolling);
        cfg.f32_opt("grad_clip", &mut self.grad_clip);
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.prn")]
    out: PathBuf,
    /// Loss-curve CSV output path.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Model init seed (separate from the data/shuffle seed).
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    /// Continue from an existing checkpoint instead of a fresh init
    /// (pre-train on one directory, then fine-tune on another).
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// TOML config file overriding flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 3)]
    scale: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of HR reference images.
    #[arg(long)]
    hr_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    scale: usize,
    /// Directory for CSV/Markdown outputs.
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyStatsArgs {
    /// Directory of images to classify.
    #[arg(long)]
    dir: PathBuf,
    /// Patch edge used for classification.
    #[arg(long, default_value_t = 54)]
    patch_size: usize,
    /// Downscale factor applied before classification (1 = none), matching
    /// how LR inputs are tagged at inference time.
    #[arg(long, default_value_t = 1)]
    downscale: usize,
    #[arg(long, default_value_t = 10.0)]
    gamma_upper: f32,
    #[arg(long, default_value_t = 30.0)]
    gamma_low: f32,
    /// Histogram bin width in prior units.
    #[arg(long, default_value_t = 5.0)]
    bin_width: f32,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    hr_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    scale: usize,
    /// Gain threshold in dB separating successful from failure patches.
    #[arg(long, default_value_t = 1.0)]
    threshold_db: f64,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateThresholdsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    hr_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    scale: usize,
    /// Grid as "upper,low;upper,low;..."; defaults to the reference grid.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateRollingArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Directory of HR evaluation images.
    #[arg(long)]
    hr_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    scale: usize,
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateDepthArgs {
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long)]
    hr_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    scale: usize,
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    /// Depth grid as "early,mid;early,mid;...".
    #[arg(long, default_value = "1,2;2,2;3,2;1,1;1,3")]
    grid: String,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Sr(args) => cmd_sr(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ClassifyStats(args) => cmd_classify_stats(args),
        Command::GainAnalysis(args) => cmd_gain(args),
        Command::AblateThresholds(args) => cmd_ablate_thresholds(args),
        Command::AblateRolling(args) => cmd_ablate_rolling(args),
        Command::AblateDepth(args) => cmd_ablate_depth(args),
    }
}

fn luminance_planes(dir: &Path) -> Result<Vec<ImagePlane>> {
    let images = load_image_dir(dir)?;
    images
        .into_iter()
        .map(|(_, img)| {
            Ok(match img.space() {
                ColorSpace::Rgb => rgb_to_ycbcr(&img)?.channel(0),
                ColorSpace::YCbCr => img.channel(0),
            })
        })
        .collect()
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, content)?;
    Ok(path)
}

fn cmd_train(mut args: TrainArgs) -> Result<()> {
    if let Some(cfg) = ConfigOverrides::load(args.config.as_deref())? {
        args.opts.apply(&cfg);
        cfg.path("out", &mut args.out);
        cfg.u64("model_seed", &mut args.model_seed);
        if let Some(p) = cfg.string("init_from") {
            args.init_from = Some(PathBuf::from(p));
        }
    }
    let opts = &args.opts;
    let planes = luminance_planes(&opts.train_dir)
        .with_context(|| format!("loading training images from {}", opts.train_dir.display()))?;
    let pairs = make_training_pairs(
        &planes,
        &opts.scales,
        &opts.thresholds()?,
        opts.patch_size,
        opts.seed,
    )?;
    let tag_counts = pairs.iter().fold([0usize; 3], |mut acc, p| {
        acc[p.tag.index()] += 1;
        acc
    });
    println!(
        "{} images -> {} pairs (mild {}, moderate {}, severe {})",
        planes.len(),
        pairs.len(),
        tag_counts[0],
        tag_counts[1],
        tag_counts[2]
    );
    let mut model = match &args.init_from {
        Some(path) => {
            let m = load_checkpoint(path)?;
            println!("continuing from {}", path.display());
            m
        }
        None => PrnModel::new(&opts.model_config()?, args.model_seed)?,
    };
    let report = train(&mut model, &pairs, &opts.train_config()?)?;
    save_checkpoint(&model, &args.out)?;
    println!("checkpoint written to {}", args.out.display());
    if let Some(path) = &args.loss_csv {
        fs::write(path, report.loss_curve_csv())?;
        println!("loss curve written to {}", path.display());
    }
    if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
        println!(
            "loss: epoch 0 = {:.6}, epoch {} = {:.6}",
            first.mean_loss, last.epoch, last.mean_loss
        );
    }
    Ok(())
}

fn cmd_sr(mut args: SrArgs) -> Result<()> {
    if let Some(cfg) = ConfigOverrides::load(args.config.as_deref())? {
        cfg.path("model", &mut args.model);
        cfg.path("input", &mut args.input);
        cfg.path("output", &mut args.output);
        cfg.usize("scale", &mut args.scale);
    }
    let model = load_checkpoint(&args.model)?;
    let image = load_image(&args.input)?;
    let (sr, trace) = super_resolve_image(&image, &model, args.scale)?;
    save_image(&sr, &args.output)?;
    let tags = trace.tag_counts();
    println!(
        "{} -> {} ({}x): {} patches (mild {}, moderate {}, severe {}), \
         {:.1} MMACs, {:.3}s total ({:.4}s reassembly)",
        args.input.display(),
        args.output.display(),
        args.scale,
        trace.patches.len(),
        tags[0],
        tags[1],
        tags[2],
        trace.total_macs() as f64 / 1e6,
        trace.total.as_secs_f64(),
        trace.reassembly.as_secs_f64()
    );
    Ok(())
}

fn cmd_eval(mut args: EvalArgs) -> Result<()> {
    if let Some(cfg) = ConfigOverrides::load(args.config.as_deref())? {
        cfg.path("model", &mut args.model);
        cfg.path("hr_dir", &mut args.hr_dir);
        cfg.usize("scale", &mut args.scale);
        cfg.path("out_dir", &mut args.out_dir);
    }
    let model = load_checkpoint(&args.model)?;
    let report = evaluate_dataset(&model, &args.hr_dir, args.scale)?;
    let csv = write_out(&args.out_dir, "eval.csv", &report.to_csv())?;
    let md = write_out(&args.out_dir, "eval.md", &report.to_markdown())?;
    println!(
        "{} images at {}x: PSNR {:.2} dB (bicubic {:.2}), SSIM {:.4} (bicubic {:.4})",
        report.rows.len(),
        args.scale,
        report.mean_psnr(),
        report.mean_bicubic_psnr(),
        report.mean_ssim(),
        report.mean_bicubic_ssim()
    );
    println!("wrote {} and {}", csv.display(), md.display());
    Ok(())
}

fn cmd_classify_stats(mut args: ClassifyStatsArgs) -> Result<()> {
    if let Some(cfg) = ConfigOverrides::load(args.config.as_deref())? {
        cfg.path("dir", &mut args.dir);
        cfg.usize("patch_size", &mut args.patch_size);
        cfg.usize("downscale", &mut args.downscale);
        cfg.f32("gamma_upper", &mut args.gamma_upper);
        cfg.f32("gamma_low", &mut args.gamma_low);
        cfg.f32("bin_width", &mut args.bin_width);
        cfg.path("out_dir", &mut args.out_dir);
    }
    if args.downscale == 0 {
        bail!("downscale must be >= 1");
    }
    let thresholds = Thresholds::new(args.gamma_upper, args.gamma_low)?;
    let images = load_image_dir(&args.dir)?;
    let mut counts_csv = String::from("image,patches,mild,moderate,severe\n");
    let mut priors = Vec::new();
    for (name, img) in &images {
        let y = match img.space() {
            ColorSpace::Rgb => rgb_to_ycbcr(img)?.channel(0),
            ColorSpace::YCbCr => img.channel(0),
        };
        let y = if args.downscale > 1 {
            prn_core::imagepipe::bicubic_resize(
                &y,
                (y.width() / args.downscale).max(1),
                (y.height() / args.downscale).max(1),
            )
        } else {
            y
        };
        let (_, patches) = prn_core::imagepipe::crop_patches(&y, args.patch_size)?;
        let mut counts = [0usize; 3];
        for patch in &patches {
            let p = gradient_prior(patch)?;
            priors.push(p);
            counts[classify(p, &thresholds).index()] += 1;
        }
        counts_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            name,
            patches.len(),
            counts[0],
            counts[1],
            counts[2]
        ));
    }
    let hist = histogram_of(&priors, args.bin_width)?;
    let counts_path = write_out(&args.out_dir, "tag_counts.csv", &counts_csv)?;
    let hist_path = write_out(&args.out_dir, "prior_histogram.csv", &hist.to_csv())?;
    println!(
        "{} images, {} patches; wrote {} and {}",
        images.len(),
        hist.total,
        counts_path.display(),
        hist_path.display()
    );
    Ok(())
}

fn gain_summary(report: &GainReport) -> String {
    let succ = report.successful();
    let fail = report.failures();
    format!(
        "threshold {:.2} dB: {} successful / {} failure patches; \
         mean prior successful {} vs failure {}\n",
        report.gain_threshold_db,
        succ.len(),
        fail.len(),
        GainReport::mean_prior(&succ)
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "-".into()),
        GainReport::mean_prior(&fail)
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "-".into()),
    )
}

fn cmd_gain(mut args: GainArgs) -> Result<()> {
    if let Some(cfg) = ConfigOverrides::load(args.config.as_deref())? {
        cfg.path("model", &mut args.model);
        cfg.path("hr_dir", &mut args.hr_dir);
        cfg.usize("scale", &mut args.scale);
        cfg.f64("threshold_db", &mut args.threshold_db);
        cfg.path("out_dir", &mut args.out_dir);
    }
    let model = load_checkpoint(&args.model)?;
    let images = load_image_dir(&args.hr_dir)?;
    let report = gain_analysis(&model, &images, args.scale, args.threshold_db)?;
    let path = write_out(&args.out_dir, "gain_analysis.csv", &report.to_csv())?;
    print!("{}", gain_summary(&report));
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_pair_grid(s: &str) -> Result<Vec<(f32, f32)>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once(',')
                .with_context(|| format!("bad grid entry '{p}' (expected 'a,b')"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn cmd_ablate_thresholds(mut args: AblateThresholdsArgs) -> Result<()> {
    if let Some(cfg) = ConfigOverrides::load(args.config.as_deref())? {
        cfg.path("model", &mut args.model);
        cfg.path("hr_dir", &mut args.hr_dir);
        cfg.usize("scale", &mut args.scale);
        cfg.string_opt("grid", &mut args.grid);
        cfg.path("out_dir", &mut args.out_dir);
    }
    let model = load_checkpoint(&args.model)?;
    let images = load_image_dir(&args.hr_dir)?;
    let grid = match &args.grid {
        Some(s) => parse_pair_grid(s)?,
        None => reference_threshold_grid(),
    };
    let rows = ablate_thresholds(&model, &images, args.scale, &grid)?;
    let path = write_out(&args.out_dir, "threshold_sweep.csv", &threshold_rows_csv(&rows))?;
    for r in &rows {
        println!(
            "({:>5.1}, {:>5.1}): PSNR {:.3} dB, {:.1} MMACs",
            r.gamma_upper,
            r.gamma_low,
            r.mean_psnr_db,
            r.mean_macs / 1e6
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn build_recipe(
    opts: &TrainOpts,
    hr_dir: &Path,
    scale: usize,
    model_seed: u64,
) -> Result<AblationRecipe> {
    Ok(AblationRecipe {
        train_images: luminance_planes(&opts.train_dir)?,
        eval_images: load_image_dir(hr_dir)?,
        model_config: opts.model_config()?,
        train_config: opts.train_config()?,
        model_seed,
        scale,
    })
}

fn cmd_ablate_rolling(mut args: AblateRollingArgs) -> Result<()> {
    if let Some(cfg) = ConfigOverrides::load(args.config.as_deref())? {
        args.opts.apply(&cfg);
        cfg.path("hr_dir", &mut args.hr_dir);
        cfg.usize("scale", &mut args.scale);
        cfg.u64("model_seed", &mut args.model_seed);
        cfg.path("out_dir", &mut args.out_dir);
    }
    let recipe = build_recipe(&args.opts, &args.hr_dir, args.scale, args.model_seed)?;
    let report = ablate_rolling(&recipe)?;
    let path = write_out(&args.out_dir, "rolling_ablation.csv", &report.to_csv())?;
    println!(
        "rolling on:  PSNR {:.3} dB, {:.1} MMACs",
        report.with_rolling.mean_psnr(),
        report.with_rolling.mean_macs() / 1e6
    );
    println!(
        "rolling off: PSNR {:.3} dB, {:.1} MMACs",
        report.without_rolling.mean_psnr(),
        report.without_rolling.mean_macs() / 1e6
    );
    println!(
        "reference delta at full scale: {:+.2} dB (not desk-reproducible)",
        report.reference_delta_db
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_depth_grid(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once(',')
                .with_context(|| format!("bad depth entry '{p}' (expected 'early,mid')"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn cmd_ablate_depth(mut args: AblateDepthArgs) -> Result<()> {
    if let Some(cfg) = ConfigOverrides::load(args.config.as_deref())? {
        args.opts.apply(&cfg);
        cfg.path("hr_dir", &mut args.hr_dir);
        cfg.usize("scale", &mut args.scale);
        cfg.u64("model_seed", &mut args.model_seed);
        if let Some(g) = cfg.string("grid") {
            args.grid = g;
        }
        cfg.path("out_dir", &mut args.out_dir);
    }
    let recipe = build_recipe(&args.opts, &args.hr_dir, args.scale, args.model_seed)?;
    let grid = parse_depth_grid(&args.grid)?;
    let rows = ablate_stage_depth(&recipe, &grid)?;
    let path = write_out(&args.out_dir, "depth_sweep.csv", &depth_rows_csv(&rows))?;
    for r in &rows {
        println!(
            "early {} / mid {}: PSNR {:.3} dB, {:.1} MMACs, {:.3}s per image",
            r.depth_early,
            r.depth_mid,
            r.mean_psnr_db,
            r.mean_macs / 1e6,
            r.mean_wall_s
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
