use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posedet_core::config::PipelineConfig;
use posedet_core::dataio::{
    read_appearance_models, read_config, read_detections, read_features, read_patches, read_priors,
    write_appearance_models, write_curves_csv, write_detections, write_features, write_metrics, write_patches,
    write_priors, write_proposal_stats, Dataset, DetectionsHeader, MetricsReport, ProposalStatsReport, Split,
};
use posedet_core::detection::Ablation;
use posedet_core::evaluation::ProposalStats;
use posedet_core::synth::{self, SynthConfig, SynthRecord};
use posedet_core::{pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "posedet", version, about = "Pose-conditioned object detection over externally supplied proposals")]
struct Cli {
    /// Pipeline configuration (JSON); omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the configured ablation.
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-class geometric priors on the training split.
    FitPriors {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label enlarged training crops as class positives, background or discarded.
    MakePatches {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and calibrate one-vs-rest appearance models on patch features.
    TrainAppearance {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        /// Patch feature matrix; its row index sits next to it as `<file>.index.json`.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score, suppress and rank the proposals of one split.
    Detect {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long)]
        appearance: Option<PathBuf>,
        #[arg(long, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class AP, mAP and precision-recall curves.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for `pr_<class>.csv` curves.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Proposal precision and per-class recall at IoU 0.5.
    ProposalStats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic test data.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Generate a dataset of synthetic scenes.
    Scenes {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (JSON); omitted fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        sizes: SplitSizes,
    },
    /// Features for labeled patches of a synthetic dataset.
    PatchFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SplitSizes {
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => read_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(a) = cli.ablation {
        cfg.ablation = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_synth_config(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn print_patch_counts(set: &posedet_core::appearance::PatchLabelSet) {
    let counts = set.counts();
    println!("{:<20} {:>8}", "class", "patches");
    for (class, n) in &counts.positives {
        println!("{class:<20} {n:>8}");
    }
    println!("{:<20} {:>8}", "background", counts.background);
    println!("{:<20} {:>8}", "discarded", counts.discarded);
}

fn print_metrics(report: &MetricsReport) {
    println!("{:<20} {:>8} {:>6}", "class", "AP", "GT");
    for (class, m) in &report.classes {
        let ap = m.ap.map_or_else(|| "n/a".to_string(), |ap| format!("{:.2}", 100.0 * ap));
        println!("{class:<20} {ap:>8} {:>6}", m.ground_truth);
    }
    println!("{:<20} {:>8.2}", "mAP", 100.0 * report.map);
}

fn print_proposal_stats(stats: &ProposalStats) {
    println!("{:<20} {:>8}", "class", "recall");
    for (class, r) in &stats.recall {
        println!("{class:<20} {:>8.2}", 100.0 * r);
    }
    println!("{:<20} {:>8.2}", "precision", 100.0 * stats.precision);
    println!("{:<20} {:>8.1}", "proposals/image", stats.proposals_per_image);
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| Error::validation(format!("worker pool: {e}")))?;

    match cli.command {
        Command::FitPriors { manifest, out } => {
            let ds = Dataset::load(&manifest)?;
            let file = pipeline::fit_priors(&ds, &cfg)?;
            write_priors(&out, &file)?;
            log::info!("wrote {} prior models to {}", file.models.len(), out.display());
        }
        Command::MakePatches { manifest, out } => {
            let ds = Dataset::load(&manifest)?;
            let set = pipeline::make_patches(&ds, &cfg)?;
            write_patches(&out, &set)?;
            print_patch_counts(&set);
        }
        Command::TrainAppearance { manifest, patches, features, priors, out } => {
            let ds = Dataset::load(&manifest)?;
            let set = read_patches(&patches)?;
            let (matrix, index) = read_features(&features)?;
            let priors = read_priors(&priors)?;
            let file = pipeline::train_appearance(&ds, &set, &matrix, &index, &priors, &cfg)?;
            write_appearance_models(&out, &file)?;
            log::info!("wrote {} appearance models to {}", file.models.len(), out.display());
        }
        Command::Detect { manifest, priors, appearance, split, out } => {
            let ds = Dataset::load(&manifest)?;
            let priors = match (&priors, cfg.ablation.uses_geometry()) {
                (Some(p), true) => read_priors(p)?.models,
                (None, true) => return Err(Error::validation(format!("--priors is required for ablation {}", cfg.ablation))),
                (_, false) => Default::default(),
            };
            let appearance = match (&appearance, cfg.ablation.uses_appearance()) {
                (Some(p), true) => read_appearance_models(p)?.models,
                (None, true) => {
                    return Err(Error::validation(format!("--appearance is required for ablation {}", cfg.ablation)))
                }
                (_, false) => Default::default(),
            };
            let dets = pipeline::detect(&ds, split, &priors, &appearance, &cfg)?;
            let header = DetectionsHeader { ablation: cfg.ablation, split, count: dets.len() };
            write_detections(&out, &header, &dets)?;
            log::info!("wrote {} detections to {}", dets.len(), out.display());
        }
        Command::Evaluate { manifest, detections, out, curves } => {
            let ds = Dataset::load(&manifest)?;
            let (header, dets) = read_detections(&detections)?;
            let (report, pr) = pipeline::evaluate(&ds, header.split, header.ablation, &dets)?;
            write_metrics(&out, &report)?;
            if let Some(dir) = curves {
                write_curves_csv(&dir, &pr)?;
            }
            print_metrics(&report);
        }
        Command::ProposalStats { manifest, split, out } => {
            let ds = Dataset::load(&manifest)?;
            let stats = pipeline::proposal_stats(&ds, split)?;
            print_proposal_stats(&stats);
            write_proposal_stats(&out, &ProposalStatsReport { split, stats })?;
        }
        Command::Synth(SynthCommand::Scenes { out, spec, sizes }) => {
            let mut config: SynthConfig = match &spec {
                Some(p) => read_synth_config(p)?,
                None => SynthConfig::default(),
            };
            config.train = sizes.train.unwrap_or(config.train);
            config.val = sizes.val.unwrap_or(config.val);
            config.test = sizes.test.unwrap_or(config.test);
            let record = SynthRecord::new(config, cfg.seed)?;
            let path = synth::write_dataset(&out, &record)?;
            log::info!("wrote {}", path.display());
        }
        Command::Synth(SynthCommand::PatchFeatures { manifest, patches, out }) => {
            let ds = Dataset::load(&manifest)?;
            let record = synth::read_record(&ds.root.join(synth::RECORD_FILE))?;
            let set = read_patches(&patches)?;
            let (matrix, index) = synth::patch_features(&ds, &set, &record)?;
            write_features(&out, &matrix, &index)?;
            log::info!("wrote {} patch feature rows to {}", matrix.rows(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
