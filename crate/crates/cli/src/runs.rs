//! Single-run subcommands: train, pretrain, finetune, baseline.
//!
//! Each reads a dataset and (usually) a split manifest, and writes its model,
//! training history and test metrics into `--out`. Class indices follow the
//! sorted labels of the whole dataset; they are recorded in `classes.json`.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tclab_core::boost::{self, BoostParams, FeatureSource};
use tclab_core::dataio::{load_manifest, make_train_val, Dataset, Fold, PacketSeries};
use tclab_core::flowpic::{FlowpicConfig, Normalization, DEFAULT_WINDOW};
use tclab_core::nn::{
    evaluate, finetune as finetune_net, pretrain_simclr, train_supervised, Checkpoint, EpochRecord, LabeledImages,
    Network, NetworkConfig, TrainConfig, TrainOutcome,
};
use tclab_core::stats::{compute_metrics, MetricSet};

use crate::{parse_augmentation, parse_normalization, read_dataset, run_err, usage, write_text, CliResult};

#[derive(Args, Clone)]
pub struct FlowpicOpts {
    /// Flowpic resolution (32, 64 or 1500 for the CNNs).
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Flowpic time window in seconds.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: f64,
    /// Pixel normalization: raw or unit_max.
    #[arg(long, default_value = "raw", value_parser = parse_normalization)]
    normalization: Normalization,
}

impl FlowpicOpts {
    fn config(&self) -> FlowpicConfig {
        FlowpicConfig {
            resolution: self.resolution,
            window: self.window,
            normalization: self.normalization,
        }
    }
}

/// Overrides of the training defaults of each command.
#[derive(Args, Clone)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Upper bound on epochs (default 500).
    #[arg(long)]
    max_epochs: Option<usize>,
}

impl TrainOpts {
    fn apply(&self, base: TrainConfig) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            patience: self.patience.unwrap_or(base.patience),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            ..base
        }
        .with_seed(self.seed);
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct TrainArgs {
    dataset: PathBuf,
    /// Split manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Training augmentation: a name (no_aug, change_rtt, time_shift,
    /// packet_loss, rotate, horizontal_flip, color_jitter) or JSON.
    #[arg(long, default_value = "no_aug")]
    augmentation: String,
    /// Augmented copies per training flow.
    #[arg(long, default_value_t = 10)]
    times: usize,
    /// Enable the dropout layers.
    #[arg(long)]
    dropout: bool,
    /// Training fraction used when the fold has no validation ids.
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    #[command(flatten)]
    flowpic: FlowpicOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct PretrainArgs {
    dataset: PathBuf,
    /// Restrict the unlabeled pool to the train and validation ids of a fold.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// The two augmentations producing each view.
    #[arg(long, value_delimiter = ',', default_value = "change_rtt,time_shift")]
    pair: Vec<String>,
    #[arg(long, default_value_t = 30)]
    projection_dim: usize,
    #[arg(long)]
    dropout: bool,
    /// InfoNCE temperature.
    #[arg(long, default_value_t = 0.07)]
    temperature: f64,
    #[command(flatten)]
    flowpic: FlowpicOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct FinetuneArgs {
    dataset: PathBuf,
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest whose fold holds the labeled shots (train ids) and test ids.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[command(flatten)]
    flowpic: FlowpicOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Features {
    /// Flattened raw-count flowpic.
    Flowpic,
    /// Sizes, directions and inter-arrival times of the first packets.
    EarlyTimeseries,
}

#[derive(Args)]
pub struct BaselineArgs {
    dataset: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, value_enum, default_value = "flowpic")]
    features: Features,
    /// Flowpic resolution (flowpic features).
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Packets per flow (early-timeseries features).
    #[arg(long, default_value_t = 10)]
    packets: usize,
    #[arg(long, default_value_t = 100)]
    rounds: usize,
    #[arg(long, default_value_t = 6)]
    max_depth: usize,
    #[arg(long, default_value_t = 0.3)]
    learning_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

fn load_fold(d: &Dataset, manifest: &Path, fold: usize) -> CliResult<Fold> {
    let m = load_manifest(manifest).map_err(usage)?;
    m.validate(d).map_err(usage)?;
    m.folds
        .get(fold)
        .cloned()
        .ok_or_else(|| usage(format!("manifest has {} folds, no fold {fold}", m.folds.len())))
}

struct Labeled<'a> {
    data: &'a Dataset,
    classes: Vec<String>,
}

impl<'a> Labeled<'a> {
    fn new(data: &'a Dataset) -> Self {
        Self {
            classes: data.labels(),
            data,
        }
    }

    fn record(&self, id: &str) -> CliResult<&'a tclab_core::FlowRecord> {
        self.data.get(id).ok_or_else(|| usage(format!("unknown flow {id:?}")))
    }

    fn labels(&self, ids: &[String]) -> CliResult<Vec<usize>> {
        ids.iter()
            .map(|id| {
                let r = self.record(id)?;
                Ok(self.classes.binary_search(&r.label).expect("label is indexed"))
            })
            .collect()
    }

    fn series(&self, ids: &[String]) -> CliResult<Vec<PacketSeries>> {
        ids.iter().map(|id| Ok(self.record(id)?.series.clone())).collect()
    }

    fn images(&self, ids: &[String], fp: &FlowpicConfig) -> CliResult<LabeledImages> {
        let images = self.series(ids)?.iter().map(|s| fp.image(s)).collect();
        Ok(LabeledImages {
            images,
            labels: self.labels(ids)?,
        })
    }

    fn score(&self, net: &Network<f32>, ids: &[String], fp: &FlowpicConfig) -> CliResult<MetricSet> {
        let data = self.images(ids, fp)?;
        let eval = evaluate(net, &data.images).map_err(run_err)?;
        compute_metrics(&data.labels, &eval.predictions, self.classes.len()).map_err(run_err)
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn write_outputs(
    out: &Path,
    classes: &[String],
    history: &[EpochRecord],
    checkpoint: &Checkpoint,
    metrics: Option<&MetricSet>,
) -> CliResult {
    std::fs::create_dir_all(out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    write_text(&out.join("classes.json"), &to_json(&classes))?;
    write_text(&out.join("history.json"), &to_json(&history))?;
    checkpoint.save(out.join("checkpoint.bin")).map_err(usage)?;
    if let Some(m) = metrics {
        write_text(&out.join("metrics.json"), &to_json(m))?;
    }
    Ok(())
}

fn report(what: &str, outcome: &TrainOutcome, metrics: Option<&MetricSet>, out: &Path) {
    let test = metrics.map_or_else(String::new, |m| {
        format!(", test accuracy {:.4}, weighted F1 {:.4}", m.accuracy, m.weighted_f1)
    });
    println!(
        "{what}: best epoch {} of {}{test}; outputs in {}",
        outcome.best_epoch,
        outcome.epochs_run,
        out.display()
    );
}

pub fn train(a: TrainArgs) -> CliResult {
    let d = read_dataset(&a.dataset)?;
    let fold = load_fold(&d, &a.manifest, a.fold)?;
    let spec = parse_augmentation(&a.augmentation)?;
    if a.times == 0 {
        return Err(usage("--times must be >= 1"));
    }
    let cfg = a.train.apply(TrainConfig::supervised())?;
    let fp = a.flowpic.config();
    let (train_ids, val_ids) = if fold.val_ids.is_empty() {
        let s = make_train_val(&d, &fold.train_ids, 1, a.train_ratio, a.train.seed).map_err(usage)?;
        (s[0].train_ids.clone(), s[0].val_ids.clone())
    } else {
        (fold.train_ids.clone(), fold.val_ids.clone())
    };
    let l = Labeled::new(&d);
    let mut rng = ChaCha8Rng::seed_from_u64(a.train.seed);
    let images = tclab_core::augment::expand_training_set(&l.series(&train_ids)?, &spec, a.times, &fp, &mut rng)
        .map_err(usage)?;
    let labels = l
        .labels(&train_ids)?
        .into_iter()
        .flat_map(|y| std::iter::repeat_n(y, a.times))
        .collect();
    let train = LabeledImages { images, labels };
    let val = l.images(&val_ids, &fp)?;
    let net_cfg = NetworkConfig::supervised(fp.resolution, l.classes.len(), a.dropout);
    let net = Network::new(net_cfg, a.train.seed).map_err(usage)?;
    let outcome = train_supervised(net, &train, &val, &cfg).map_err(run_err)?;
    let metrics = if fold.test_ids.is_empty() {
        None
    } else {
        Some(l.score(&outcome.network, &fold.test_ids, &fp)?)
    };
    write_outputs(
        &a.out,
        &l.classes,
        &outcome.history,
        &outcome.checkpoint,
        metrics.as_ref(),
    )?;
    report("train", &outcome, metrics.as_ref(), &a.out);
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> CliResult {
    let d = read_dataset(&a.dataset)?;
    let ids: Vec<String> = match &a.manifest {
        Some(m) => {
            let fold = load_fold(&d, m, a.fold)?;
            fold.train_ids.iter().chain(&fold.val_ids).cloned().collect()
        }
        None => d.records().iter().map(|r| r.flow_id.clone()).collect(),
    };
    let [first, second] = &a.pair[..] else {
        return Err(usage("--pair needs exactly two augmentations"));
    };
    let pair = (parse_augmentation(first)?, parse_augmentation(second)?);
    let cfg = TrainConfig {
        temperature: a.temperature,
        ..a.train.apply(TrainConfig::simclr())?
    };
    cfg.validate().map_err(usage)?;
    let fp = a.flowpic.config();
    let l = Labeled::new(&d);
    let net_cfg = NetworkConfig::simclr(fp.resolution, l.classes.len(), a.dropout, a.projection_dim);
    let net = Network::new(net_cfg, a.train.seed).map_err(usage)?;
    let outcome = pretrain_simclr(net, &l.series(&ids)?, pair, &fp, &cfg).map_err(run_err)?;
    write_outputs(&a.out, &l.classes, &outcome.history, &outcome.checkpoint, None)?;
    report("pretrain", &outcome, None, &a.out);
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> CliResult {
    let d = read_dataset(&a.dataset)?;
    let fold = load_fold(&d, &a.manifest, a.fold)?;
    let ck = Checkpoint::load(&a.checkpoint).map_err(usage)?;
    let pretrained = ck.to_network().map_err(usage)?;
    let fp = a.flowpic.config();
    if fp.resolution != ck.config.flowpic_dim {
        return Err(usage(format!(
            "checkpoint expects resolution {}, got --resolution {}",
            ck.config.flowpic_dim, fp.resolution
        )));
    }
    let cfg = a.train.apply(TrainConfig::finetune())?;
    let l = Labeled::new(&d);
    let train = l.images(&fold.train_ids, &fp)?;
    let outcome = finetune_net(&pretrained, l.classes.len(), &train, &cfg).map_err(|e| match e {
        tclab_core::nn::NnError::ConfigMismatch(_) => usage(e),
        e => run_err(e),
    })?;
    let metrics = if fold.test_ids.is_empty() {
        None
    } else {
        Some(l.score(&outcome.network, &fold.test_ids, &fp)?)
    };
    write_outputs(
        &a.out,
        &l.classes,
        &outcome.history,
        &outcome.checkpoint,
        metrics.as_ref(),
    )?;
    report("finetune", &outcome, metrics.as_ref(), &a.out);
    Ok(())
}

pub fn baseline(a: BaselineArgs) -> CliResult {
    let d = read_dataset(&a.dataset)?;
    let fold = load_fold(&d, &a.manifest, a.fold)?;
    let source = match a.features {
        Features::Flowpic => FeatureSource::FlattenedFlowpic {
            resolution: a.resolution,
        },
        Features::EarlyTimeseries => FeatureSource::EarlyTimeseries { packets: a.packets },
    };
    source.validate().map_err(usage)?;
    let params = BoostParams {
        n_rounds: a.rounds,
        max_depth: a.max_depth,
        learning_rate: a.learning_rate,
        ..Default::default()
    };
    params.validate().map_err(usage)?;
    let l = Labeled::new(&d);
    let features = |ids: &[String]| -> CliResult<Vec<Vec<f64>>> {
        ids.iter()
            .map(|id| Ok(boost::extract_features(l.record(id)?, &source)))
            .collect()
    };
    let model = boost::fit(&features(&fold.train_ids)?, &l.labels(&fold.train_ids)?, &params).map_err(run_err)?;
    std::fs::create_dir_all(&a.out).map_err(|e| usage(format!("{}: {e}", a.out.display())))?;
    write_text(&a.out.join("model.json"), &model.to_json())?;
    write_text(&a.out.join("classes.json"), &to_json(&l.classes))?;
    let mut summary = format!(
        "baseline: {} rounds, max depth {}",
        model.trees.len(),
        model.max_depth()
    );
    if !fold.test_ids.is_empty() {
        let y = l.labels(&fold.test_ids)?;
        let mut pred = model.predict_labels(&features(&fold.test_ids)?).map_err(run_err)?;
        pred.iter_mut().for_each(|p| *p = (*p).min(l.classes.len() - 1));
        let m = compute_metrics(&y, &pred, l.classes.len()).map_err(run_err)?;
        write_text(&a.out.join("metrics.json"), &to_json(&m))?;
        summary += &format!(", test accuracy {:.4}, weighted F1 {:.4}", m.accuracy, m.weighted_f1);
    }
    println!("{summary}; outputs in {}", a.out.display());
    Ok(())
}
