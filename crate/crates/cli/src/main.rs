//! `tclab`: curate datasets, build splits and flowpics, train models, run
//! experiment campaigns and analyze their results.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when a run fails.

mod runs;
mod tables;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tclab_core::augment::AugmentationSpec;
use tclab_core::campaign::{load_campaign, load_grid, plan_campaign, run_campaign, summarize, write_drift_report};
use tclab_core::dataio::{
    filter_min_class_size, filter_min_packets, load_dataset, make_fewshot_folds, make_stratified_split, make_train_val,
    save_manifest, train_val_manifest, Dataset,
};
use tclab_core::flowpic::{build_flowpic, Normalization, DEFAULT_WINDOW};
use tclab_core::synth::{generate, SynthConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid inputs.
    Usage(String),
    /// A run was attempted and failed.
    Run(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Run(m) => f.write_str(m),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn run_err(e: impl fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

#[derive(Parser)]
#[command(name = "tclab", version, about = "Flowpic traffic classification experiments")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a dataset by packet count and class size.
    Curate(CurateArgs),
    /// Write a split manifest.
    Split(SplitArgs),
    /// Export the flowpic of one flow as CSV or PGM.
    Flowpic(FlowpicArgs),
    /// Train a supervised CNN on one fold of a manifest.
    Train(runs::TrainArgs),
    /// Contrastive pre-training on unlabeled flows.
    Pretrain(runs::PretrainArgs),
    /// Fine-tune a linear classifier on a pre-trained backbone.
    Finetune(runs::FinetuneArgs),
    /// Fit the boosted-tree baseline on one fold of a manifest.
    Baseline(runs::BaselineArgs),
    /// Plan or run an experiment grid.
    #[command(subcommand)]
    Campaign(CampaignCommand),
    /// Aggregate a campaign directory into report tables and diagrams.
    Report(ReportArgs),
    /// Per-partition mean flowpics and packet-size densities.
    Drift(DriftArgs),
    /// Rank statistics, post-hoc tests and confidence intervals on CSV tables.
    #[command(subcommand)]
    Stats(tables::StatsCommand),
    /// Generate a synthetic dataset with separable classes.
    Synth(SynthArgs),
}

#[derive(Args)]
struct CurateArgs {
    /// Input dataset (JSON Lines).
    input: PathBuf,
    /// Output dataset.
    #[arg(long)]
    out: PathBuf,
    /// Keep flows with more than this many packets.
    #[arg(long)]
    min_packets: Option<usize>,
    /// Drop classes with fewer flows than this.
    #[arg(long)]
    min_class_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    /// k disjoint few-shot pools per class; the rest is the test set.
    FewshotFolds,
    /// s random stratified train/validation splits.
    TrainVal,
    /// One stratified train/validation/test partition.
    Stratified,
}

#[derive(Args)]
struct SplitArgs {
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "fewshot-folds")]
    scheme: Scheme,
    /// Number of folds (fewshot-folds).
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Flows per class and fold (fewshot-folds).
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Number of splits (train-val).
    #[arg(long, default_value_t = 3)]
    splits: usize,
    /// Training fraction (train-val).
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    /// Train, validation and test fractions (stratified).
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    ratios: Vec<f64>,
    /// Restrict the split to flows of this partition.
    #[arg(long)]
    partition: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageFormat {
    Csv,
    Pgm,
}

#[derive(Args)]
struct FlowpicArgs {
    dataset: PathBuf,
    #[arg(long)]
    flow_id: String,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Time window in seconds.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: f64,
    #[arg(long, value_enum, default_value = "csv")]
    format: ImageFormat,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CampaignCommand {
    /// Print the number of planned experiments per method.
    Plan {
        /// Grid file (TOML or JSON).
        grid: PathBuf,
    },
    /// Run every experiment of a grid and write the report.
    Run {
        /// Grid file (TOML or JSON).
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Campaign directory.
    dir: PathBuf,
    /// Significance level of the rank analysis.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct DriftArgs {
    dataset: PathBuf,
    /// Partitions to compare; all partitions when absent.
    #[arg(long, value_delimiter = ',')]
    partitions: Vec<String>,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 30)]
    min_packets: usize,
    #[arg(long, default_value_t = 120)]
    max_packets: usize,
    /// Partition names assigned round-robin.
    #[arg(long, value_delimiter = ',')]
    partitions: Vec<String>,
    /// Size shift in bytes per partition index.
    #[arg(long, default_value_t = 0.0)]
    drift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).map_err(usage)
}

pub fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn parse_augmentation(s: &str) -> CliResult<AugmentationSpec> {
    s.parse().map_err(|e| usage(format!("augmentation {s:?}: {e}")))
}

pub fn parse_normalization(s: &str) -> Result<Normalization, String> {
    match s {
        "raw" => Ok(Normalization::Raw),
        "unit_max" => Ok(Normalization::UnitMax),
        _ => Err(format!("unknown normalization {s:?} (raw, unit_max)")),
    }
}

fn curate(a: CurateArgs) -> CliResult {
    let d = read_dataset(&a.input)?;
    let mut out = d.clone();
    if let Some(n) = a.min_packets {
        out = filter_min_packets(&out, n);
    }
    if let Some(m) = a.min_class_size {
        out = filter_min_class_size(&out, m);
    }
    if out.is_empty() {
        return Err(usage("curation removed every flow"));
    }
    out.save(&a.out).map_err(usage)?;
    println!(
        "kept {} of {} flows in {} classes",
        out.len(),
        d.len(),
        out.class_index().len()
    );
    Ok(())
}

fn split(a: SplitArgs) -> CliResult {
    let d = read_dataset(&a.dataset)?;
    let pool = match &a.partition {
        Some(p) => d.partition(p),
        None => d,
    };
    if pool.is_empty() {
        return Err(usage("no flows to split"));
    }
    let manifest = match a.scheme {
        Scheme::FewshotFolds => make_fewshot_folds(&pool, a.k, a.per_class, a.seed).map_err(usage)?,
        Scheme::TrainVal => {
            let ids: Vec<String> = pool.records().iter().map(|r| r.flow_id.clone()).collect();
            let splits = make_train_val(&pool, &ids, a.splits, a.ratio, a.seed).map_err(usage)?;
            train_val_manifest(&splits, a.ratio, a.seed)
        }
        Scheme::Stratified => {
            let [t, v, s] = a.ratios[..] else {
                return Err(usage("--ratios needs three values"));
            };
            make_stratified_split(&pool, (t, v, s), a.seed).map_err(usage)?
        }
    };
    save_manifest(&manifest, &a.out).map_err(usage)?;
    println!("{} folds written to {}", manifest.folds.len(), a.out.display());
    Ok(())
}

fn flowpic(a: FlowpicArgs) -> CliResult {
    if a.resolution < 2 || !(a.window > 0.0 && a.window.is_finite()) {
        return Err(usage("resolution must be >= 2 and window positive"));
    }
    let d = read_dataset(&a.dataset)?;
    let rec = d
        .get(&a.flow_id)
        .ok_or_else(|| usage(format!("no flow {:?}", a.flow_id)))?;
    let fp = build_flowpic(&rec.series, a.resolution, a.window);
    let text = match a.format {
        ImageFormat::Csv => fp.to_csv(),
        ImageFormat::Pgm => fp.to_pgm(),
    };
    match a.out {
        Some(p) => write_text(&p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn campaign(c: CampaignCommand) -> CliResult {
    match c {
        CampaignCommand::Plan { grid } => {
            let g = load_grid(&grid).map_err(usage)?;
            let plan = plan_campaign(&g).map_err(usage)?;
            let mut per: std::collections::BTreeMap<String, usize> = Default::default();
            for cfg in &plan {
                *per.entry(cfg.method.to_string()).or_default() += 1;
            }
            for (m, n) in per {
                println!("{m}: {n}");
            }
            println!("total: {}", plan.len());
            Ok(())
        }
        CampaignCommand::Run { grid, workers, out } => {
            if workers == 0 {
                return Err(usage("--workers must be >= 1"));
            }
            let g = load_grid(&grid).map_err(usage)?;
            let plan = plan_campaign(&g).map_err(usage)?;
            eprintln!("running {} experiments on {workers} workers", plan.len());
            let records = run_campaign(&plan, workers, &out).map_err(usage)?;
            let report = summarize(&plan, &records, g.alpha).map_err(run_err)?;
            let report_dir = out.join("report");
            report.write(&report_dir).map_err(usage)?;
            if g.drift {
                let data = tclab_core::campaign::prepare_dataset(&g.dataset, &g.curation).map_err(usage)?;
                let res = g.resolutions[0];
                write_drift_report(&data, res, g.window, &report_dir.join("drift")).map_err(run_err)?;
            }
            println!(
                "{} planned, {} completed, {} failed; report in {}",
                report.planned,
                report.completed,
                report.failed,
                report_dir.display()
            );
            if report.failed > 0 {
                return Err(run_err(format!("{} experiments failed", report.failed)));
            }
            Ok(())
        }
    }
}

fn report(a: ReportArgs) -> CliResult {
    let (plan, records) = load_campaign(&a.dir).map_err(usage)?;
    let report = summarize(&plan, &records, a.alpha).map_err(usage)?;
    report.write(&a.dir.join("report")).map_err(usage)?;
    print!("{}", report.to_markdown());
    if report.failed > 0 {
        return Err(run_err(format!("{} experiments failed or are missing", report.failed)));
    }
    Ok(())
}

fn drift(a: DriftArgs) -> CliResult {
    let d = read_dataset(&a.dataset)?;
    let d = if a.partitions.is_empty() {
        d
    } else {
        for p in &a.partitions {
            if d.partition(p).is_empty() {
                return Err(usage(format!("partition {p:?} has no flows")));
            }
        }
        d.filter(|r| r.partition.as_ref().is_some_and(|p| a.partitions.contains(p)))
    };
    write_drift_report(&d, a.resolution, a.window, &a.out).map_err(usage)?;
    println!("drift diagnostics written to {}", a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        num_classes: a.classes,
        flows_per_class: a.per_class,
        min_packets: a.min_packets,
        max_packets: a.max_packets,
        partitions: a.partitions,
        drift: a.drift,
        seed: a.seed,
    };
    let d = generate(&cfg).map_err(usage)?;
    d.save(&a.out).map_err(usage)?;
    println!("{} flows written to {}", d.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Curate(a) => curate(a),
        Command::Split(a) => split(a),
        Command::Flowpic(a) => flowpic(a),
        Command::Train(a) => runs::train(a),
        Command::Pretrain(a) => runs::pretrain(a),
        Command::Finetune(a) => runs::finetune(a),
        Command::Baseline(a) => runs::baseline(a),
        Command::Campaign(c) => campaign(c),
        Command::Report(a) => report(a),
        Command::Drift(a) => drift(a),
        Command::Stats(c) => tables::stats(c),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Run(m)) => {
            eprintln!("run failed: {m}");
            ExitCode::from(2)
        }
    }
}
