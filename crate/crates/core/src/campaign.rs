//! Experiment grids: planning, seeded execution, artifacts and reports.
//!
//! A campaign directory looks like
//!
//! ```text
//! <out>/plan.json              every planned ExperimentConfig, in order
//! <out>/runs.json              one RunRecord per planned experiment
//! <out>/<id>/config.json
//! <out>/<id>/split.json        train/validation ids actually used
//! <out>/<id>/metrics.json      test population -> MetricSet (completed runs only)
//! <out>/<id>/checkpoint.bin    network checkpoint, or model.json for boosted trees
//! <out>/<id>/log.txt
//! <out>/report/                summary.md, cells.csv, summary.json, rank CSVs, CD diagrams
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{expand_training_set, AugmentationSpec};
use crate::boost::{self, BoostParams, FeatureSource};
use crate::dataio::{
    filter_min_class_size, filter_min_packets, load_dataset, make_fewshot_folds, make_stratified_split, make_train_val,
    DataError, Dataset, PacketSeries,
};
use crate::flowpic::{FlowpicConfig, Image, Normalization, DEFAULT_WINDOW};
use crate::nn::{
    evaluate, finetune, pretrain_simclr, train_supervised, Checkpoint, LabeledImages, Network, NetworkConfig,
    TrainConfig,
};
use crate::stats::{
    cd_diagram_svg, cd_groups, compute_metrics, csv_field, drift_diagnostics, mean, nemenyi_cd, rank_methods,
    t_confidence_interval, MetricSet, RankTable, StatsError,
};

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CampaignError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn grid_err<T>(msg: impl Into<String>) -> Result<T, CampaignError> {
    Err(CampaignError::Grid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Supervised,
    SimclrFinetune,
    BoostBaseline,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Supervised => "supervised",
            Method::SimclrFinetune => "simclr_finetune",
            Method::BoostBaseline => "boost_baseline",
        })
    }
}

/// Curation filters applied right after loading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Curation {
    /// Keep flows with strictly more packets than this.
    pub min_packets: Option<usize>,
    /// Drop classes with fewer flows than this.
    pub min_class_size: Option<usize>,
}

impl Curation {
    pub fn apply(&self, d: &Dataset) -> Dataset {
        let mut out = d.clone();
        if let Some(n) = self.min_packets {
            out = filter_min_packets(&out, n);
        }
        if let Some(m) = self.min_class_size {
            out = filter_min_class_size(&out, m);
        }
        out
    }
}

pub fn prepare_dataset(path: &Path, curation: &Curation) -> Result<Dataset, DataError> {
    Ok(curation.apply(&load_dataset(path)?))
}

/// How training pools are drawn from the (training partition of the) dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SplitPlan {
    /// `k` disjoint pools of `per_class` flows per class; flows outside the
    /// pool form the "leftover" test population.
    FewshotFolds { k: usize, per_class: usize },
    /// A single stratified train/val/test partition; train and val are
    /// pooled and re-split per split index.
    Stratified { ratios: (f64, f64, f64) },
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self::FewshotFolds { k: 5, per_class: 100 }
    }
}

impl SplitPlan {
    pub fn folds(&self) -> usize {
        match self {
            Self::FewshotFolds { k, .. } => *k,
            Self::Stratified { .. } => 1,
        }
    }
}

/// Optional overrides of a method's default [`TrainConfig`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub max_epochs: Option<usize>,
    pub temperature: Option<f64>,
    pub top_k: Option<usize>,
    pub optimizer: Option<crate::nn::OptimizerKind>,
}

impl TrainOverrides {
    pub fn apply(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            patience: self.patience.unwrap_or(base.patience),
            min_delta: self.min_delta.unwrap_or(base.min_delta),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            temperature: self.temperature.unwrap_or(base.temperature),
            top_k: self.top_k.unwrap_or(base.top_k),
            optimizer: self.optimizer.unwrap_or(base.optimizer),
            seed: base.seed,
        }
    }
}

/// Declarative experiment grid; read from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub name: String,
    #[serde(default)]
    pub campaign_seed: u64,
    /// JSON Lines dataset; relative paths resolve against the grid file.
    pub dataset: PathBuf,
    #[serde(default)]
    pub curation: Curation,
    /// Draw training pools only from flows tagged with this partition.
    #[serde(default)]
    pub train_partition: Option<String>,
    /// Populations evaluated by every run. `leftover` names the flows of the
    /// split's source population that were not used for training.
    #[serde(default = "default_test_partitions")]
    pub test_partitions: Vec<String>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Axis of supervised runs.
    #[serde(default = "default_augmentations")]
    pub augmentations: Vec<AugmentationSpec>,
    /// Axis of contrastive runs.
    #[serde(default = "default_pairs")]
    pub augmentation_pairs: Vec<[AugmentationSpec; 2]>,
    #[serde(default = "default_resolutions")]
    pub resolutions: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: Vec<bool>,
    #[serde(default = "default_projection_dims")]
    pub projection_dims: Vec<usize>,
    #[serde(default)]
    pub split: SplitPlan,
    #[serde(default = "default_splits_per_fold")]
    pub splits_per_fold: usize,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    /// Seed of every split; derived from the campaign seed when absent.
    #[serde(default)]
    pub split_seed: Option<u64>,
    /// Augmented copies per training sample in supervised runs.
    #[serde(default = "default_times")]
    pub times: usize,
    /// Labeled flows per class used to fine-tune on each test population.
    #[serde(default = "default_finetune_per_class")]
    pub finetune_per_class: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default)]
    pub supervised_train: TrainOverrides,
    #[serde(default)]
    pub simclr_train: TrainOverrides,
    #[serde(default)]
    pub finetune_train: TrainOverrides,
    #[serde(default)]
    pub boost: BoostParams,
    /// Flattened flowpics follow the resolution axis.
    #[serde(default)]
    pub boost_features: FeatureSource,
    /// Significance level of the rank analysis.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Write per-partition drift diagnostics with the report.
    #[serde(default)]
    pub drift: bool,
}

pub const LEFTOVER: &str = "leftover";

fn default_test_partitions() -> Vec<String> {
    vec![LEFTOVER.into()]
}
fn default_methods() -> Vec<Method> {
    vec![Method::Supervised]
}
fn default_augmentations() -> Vec<AugmentationSpec> {
    vec![AugmentationSpec::NoAug]
}
fn default_pairs() -> Vec<[AugmentationSpec; 2]> {
    vec![[AugmentationSpec::change_rtt(), AugmentationSpec::time_shift()]]
}
fn default_resolutions() -> Vec<usize> {
    vec![32]
}
fn default_dropout() -> Vec<bool> {
    vec![false]
}
fn default_projection_dims() -> Vec<usize> {
    vec![30]
}
fn default_splits_per_fold() -> usize {
    3
}
fn default_train_ratio() -> f64 {
    0.8
}
fn default_times() -> usize {
    10
}
fn default_finetune_per_class() -> usize {
    10
}
fn default_window() -> f64 {
    DEFAULT_WINDOW
}
fn default_alpha() -> f64 {
    0.05
}

impl GridSpec {
    /// Minimal grid over `dataset` with every other field at its default.
    pub fn new(name: &str, dataset: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            campaign_seed: 0,
            dataset: dataset.into(),
            curation: Curation::default(),
            train_partition: None,
            test_partitions: default_test_partitions(),
            methods: default_methods(),
            augmentations: default_augmentations(),
            augmentation_pairs: default_pairs(),
            resolutions: default_resolutions(),
            dropout: default_dropout(),
            projection_dims: default_projection_dims(),
            split: SplitPlan::default(),
            splits_per_fold: default_splits_per_fold(),
            train_ratio: default_train_ratio(),
            split_seed: None,
            times: default_times(),
            finetune_per_class: default_finetune_per_class(),
            normalization: Normalization::default(),
            window: default_window(),
            supervised_train: TrainOverrides::default(),
            simclr_train: TrainOverrides::default(),
            finetune_train: TrainOverrides::default(),
            boost: BoostParams::default(),
            boost_features: FeatureSource::default(),
            alpha: default_alpha(),
            drift: false,
        }
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.name.trim().is_empty() {
            return grid_err("name must not be empty");
        }
        if self.methods.is_empty() {
            return grid_err("methods must not be empty");
        }
        let uses = |m: Method| self.methods.contains(&m);
        let neural = uses(Method::Supervised) || uses(Method::SimclrFinetune);
        if self.resolutions.is_empty() {
            return grid_err("resolutions must not be empty");
        }
        for &r in &self.resolutions {
            if neural && !matches!(r, 32 | 64 | 1500) {
                return grid_err(format!(
                    "resolutions: {r} is not a supported network input (32, 64, 1500)"
                ));
            }
            if r < 2 {
                return grid_err(format!("resolutions: {r} is below 2"));
            }
        }
        if uses(Method::Supervised) {
            if self.augmentations.is_empty() {
                return grid_err("augmentations must not be empty for supervised runs");
            }
            for (i, a) in self.augmentations.iter().enumerate() {
                a.validate()
                    .map_err(|e| CampaignError::Grid(format!("augmentations[{i}]: {e}")))?;
            }
        }
        if uses(Method::SimclrFinetune) {
            if self.augmentation_pairs.is_empty() {
                return grid_err("augmentation_pairs must not be empty for simclr_finetune runs");
            }
            for (i, p) in self.augmentation_pairs.iter().enumerate() {
                for a in p {
                    a.validate()
                        .map_err(|e| CampaignError::Grid(format!("augmentation_pairs[{i}]: {e}")))?;
                }
            }
            if self.projection_dims.is_empty() || self.projection_dims.contains(&0) {
                return grid_err("projection_dims must be nonempty and positive");
            }
            if self.finetune_per_class == 0 {
                return grid_err("finetune_per_class must be >= 1");
            }
        }
        if neural && self.dropout.is_empty() {
            return grid_err("dropout must not be empty");
        }
        if uses(Method::BoostBaseline) {
            self.boost
                .validate()
                .map_err(|e| CampaignError::Grid(format!("boost: {e}")))?;
            self.boost_features
                .validate()
                .map_err(|e| CampaignError::Grid(format!("boost_features: {e}")))?;
        }
        match &self.split {
            SplitPlan::FewshotFolds { k, per_class } if *k == 0 || *per_class == 0 => {
                return grid_err("split: k and per_class must be positive");
            }
            SplitPlan::Stratified { ratios: (a, b, c) }
                if *a <= 0.0 || *b <= 0.0 || *c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 =>
            {
                return grid_err("split: ratios must be positive and sum to 1");
            }
            _ => {}
        }
        if self.splits_per_fold == 0 {
            return grid_err("splits_per_fold must be >= 1");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return grid_err("train_ratio must lie in (0, 1)");
        }
        if self.times == 0 {
            return grid_err("times must be >= 1");
        }
        if self.test_partitions.is_empty() {
            return grid_err("test_partitions must not be empty");
        }
        if !(self.window > 0.0) {
            return grid_err("window must be positive");
        }
        for (name, o, base) in [
            ("supervised_train", &self.supervised_train, TrainConfig::supervised()),
            ("simclr_train", &self.simclr_train, TrainConfig::simclr()),
            ("finetune_train", &self.finetune_train, TrainConfig::finetune()),
        ] {
            o.apply(base)
                .validate()
                .map_err(|e| CampaignError::Grid(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

/// Reads a grid from TOML (`.toml`) or JSON (anything else). A relative
/// dataset path is resolved against the grid file's directory.
pub fn load_grid(path: &Path) -> Result<GridSpec, CampaignError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parse_err = |message: String| CampaignError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut grid: GridSpec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
    } else {
        serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
    };
    if grid.dataset.is_relative() {
        if let Some(dir) = path.parent() {
            grid.dataset = dir.join(&grid.dataset);
        }
    }
    Ok(grid)
}

/// 64-bit seed mixer: the splitmix64 finalizer applied to
/// `a + 0x9E3779B97F4A7C15 * (b + 1)` (wrapping).
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(b.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Shared by every experiment of a campaign so that folds line up.
    pub split_seed: u64,
    pub init_seed: u64,
    pub aug_seed: u64,
}

/// One fully specified run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub index: usize,
    pub campaign: String,
    pub dataset: PathBuf,
    pub curation: Curation,
    pub train_partition: Option<String>,
    pub test_partitions: Vec<String>,
    pub method: Method,
    /// Label of the augmentation, augmentation pair or feature set.
    pub variant: String,
    pub augmentation: Option<AugmentationSpec>,
    pub augmentation_pair: Option<[AugmentationSpec; 2]>,
    pub resolution: usize,
    pub window: f64,
    pub normalization: Normalization,
    pub with_dropout: bool,
    pub projection_dim: Option<usize>,
    pub split: SplitPlan,
    pub splits_per_fold: usize,
    pub train_ratio: f64,
    pub fold: usize,
    pub split_index: usize,
    pub times: usize,
    pub finetune_per_class: usize,
    pub train: Option<TrainConfig>,
    pub finetune_train: Option<TrainConfig>,
    pub boost: Option<BoostParams>,
    pub boost_features: Option<FeatureSource>,
    pub seeds: Seeds,
}

impl ExperimentConfig {
    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn flowpic(&self) -> FlowpicConfig {
        FlowpicConfig {
            resolution: self.resolution,
            window: self.window,
            normalization: self.normalization,
        }
    }

    /// Axes identifying the report cell of this run (all but fold and split).
    pub fn cell_key(&self) -> CellKey {
        CellKey {
            method: self.method,
            variant: self.variant.clone(),
            resolution: self.resolution,
            with_dropout: self.with_dropout,
            projection_dim: self.projection_dim,
        }
    }
}

/// Unique labels for an axis; repeated names get a `#n` suffix.
fn axis_labels(names: &[String]) -> Vec<String> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    names
        .iter()
        .map(|n| {
            let c = seen.entry(n.as_str()).or_insert(0);
            *c += 1;
            if names.iter().filter(|m| *m == n).count() > 1 {
                format!("{n}#{c}")
            } else {
                n.clone()
            }
        })
        .collect()
}

fn pair_label(p: &[AugmentationSpec; 2]) -> String {
    format!("{}+{}", p[0].name(), p[1].name())
}

fn feature_label(f: &FeatureSource) -> String {
    match f {
        FeatureSource::FlattenedFlowpic { .. } => "flowpic".into(),
        FeatureSource::EarlyTimeseries { packets } => format!("early_timeseries_{packets}"),
    }
}

/// Expands a grid into experiments, in the order method, variant,
/// resolution, dropout, projection size, fold, split. Experiment `i` draws
/// its seeds from `derive_seed(campaign_seed, i)`.
pub fn plan_campaign(grid: &GridSpec) -> Result<Vec<ExperimentConfig>, CampaignError> {
    grid.validate()?;
    let split_seed = grid
        .split_seed
        .unwrap_or_else(|| derive_seed(grid.campaign_seed, u64::MAX));
    let mut plan = Vec::new();
    for &method in &grid.methods {
        // (label, augmentation, pair, features) per variant.
        type Variant = (
            String,
            Option<AugmentationSpec>,
            Option<[AugmentationSpec; 2]>,
            Option<FeatureSource>,
        );
        let variants: Vec<Variant> = match method {
            Method::Supervised => {
                let names: Vec<String> = grid.augmentations.iter().map(|a| a.name().to_string()).collect();
                axis_labels(&names)
                    .into_iter()
                    .zip(&grid.augmentations)
                    .map(|(l, a)| (l, Some(*a), None, None))
                    .collect()
            }
            Method::SimclrFinetune => {
                let names: Vec<String> = grid.augmentation_pairs.iter().map(pair_label).collect();
                axis_labels(&names)
                    .into_iter()
                    .zip(&grid.augmentation_pairs)
                    .map(|(l, p)| (l, None, Some(*p), None))
                    .collect()
            }
            Method::BoostBaseline => vec![(
                feature_label(&grid.boost_features),
                None,
                None,
                Some(grid.boost_features),
            )],
        };
        let resolutions: Vec<usize> = match (method, grid.boost_features) {
            (Method::BoostBaseline, FeatureSource::EarlyTimeseries { .. }) => vec![grid.resolutions[0]],
            _ => grid.resolutions.clone(),
        };
        let dropouts = if method == Method::BoostBaseline {
            vec![false]
        } else {
            grid.dropout.clone()
        };
        let projections: Vec<Option<usize>> = if method == Method::SimclrFinetune {
            grid.projection_dims.iter().map(|&p| Some(p)).collect()
        } else {
            vec![None]
        };
        for (label, aug, pair, features) in &variants {
            for &resolution in &resolutions {
                for &with_dropout in &dropouts {
                    for &projection_dim in &projections {
                        for fold in 0..grid.split.folds() {
                            for split_index in 0..grid.splits_per_fold {
                                let index = plan.len();
                                let seed_i = derive_seed(grid.campaign_seed, index as u64);
                                let (train, finetune_train) = match method {
                                    Method::Supervised => {
                                        (Some(grid.supervised_train.apply(TrainConfig::supervised())), None)
                                    }
                                    Method::SimclrFinetune => (
                                        Some(grid.simclr_train.apply(TrainConfig::simclr())),
                                        Some(grid.finetune_train.apply(TrainConfig::finetune())),
                                    ),
                                    Method::BoostBaseline => (None, None),
                                };
                                let boost_features = features.map(|f| match f {
                                    FeatureSource::FlattenedFlowpic { .. } => {
                                        FeatureSource::FlattenedFlowpic { resolution }
                                    }
                                    other => other,
                                });
                                plan.push(ExperimentConfig {
                                    id: format!("e{index:05}"),
                                    index,
                                    campaign: grid.name.clone(),
                                    dataset: grid.dataset.clone(),
                                    curation: grid.curation.clone(),
                                    train_partition: grid.train_partition.clone(),
                                    test_partitions: grid.test_partitions.clone(),
                                    method,
                                    variant: label.clone(),
                                    augmentation: *aug,
                                    augmentation_pair: *pair,
                                    resolution,
                                    window: grid.window,
                                    normalization: grid.normalization,
                                    with_dropout,
                                    projection_dim,
                                    split: grid.split.clone(),
                                    splits_per_fold: grid.splits_per_fold,
                                    train_ratio: grid.train_ratio,
                                    fold,
                                    split_index,
                                    times: grid.times,
                                    finetune_per_class: grid.finetune_per_class,
                                    train,
                                    finetune_train,
                                    boost: (method == Method::BoostBaseline).then_some(grid.boost),
                                    boost_features,
                                    seeds: Seeds {
                                        split_seed,
                                        init_seed: derive_seed(seed_i, 1),
                                        aug_seed: derive_seed(seed_i, 2),
                                    },
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { stage: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub index: usize,
    pub config_hash: String,
    pub status: RunStatus,
    /// Test population -> metrics; present iff the run completed.
    pub metrics: Option<BTreeMap<String, MetricSet>>,
    pub wall_time_s: f64,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl RunRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

#[derive(Debug)]
struct StageError {
    stage: &'static str,
    message: String,
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> Result<T, StageError>;
}

impl<T, E: fmt::Display> Stage<T> for Result<T, E> {
    fn stage(self, name: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage: name,
            message: e.to_string(),
        })
    }
}

fn fail<T>(stage: &'static str, message: impl Into<String>) -> Result<T, StageError> {
    Err(StageError {
        stage,
        message: message.into(),
    })
}

struct Outputs {
    metrics: BTreeMap<String, MetricSet>,
    checkpoint: Option<PathBuf>,
}

/// Everything derived from the dataset and split that the methods need.
struct Prepared<'a> {
    data: &'a Dataset,
    classes: Vec<String>,
    train: Vec<usize>,
    val: Vec<usize>,
    /// (name, record indices) per test population.
    populations: Vec<(String, Vec<usize>)>,
}

impl Prepared<'_> {
    fn label_of(&self, i: usize) -> Result<usize, StageError> {
        let label = &self.data.records()[i].label;
        self.classes
            .binary_search(label)
            .or_else(|_| fail("evaluate", format!("class {label} does not occur in training data")))
    }

    fn series(&self, idx: &[usize]) -> Vec<PacketSeries> {
        idx.iter().map(|&i| self.data.records()[i].series.clone()).collect()
    }
}

fn prepare<'a>(cfg: &ExperimentConfig, d: &'a Dataset, log: &mut Vec<String>) -> Result<Prepared<'a>, StageError> {
    let pool = match &cfg.train_partition {
        Some(p) => d.partition(p),
        None => d.clone(),
    };
    if pool.is_empty() {
        return fail("split", "training population is empty");
    }
    let manifest = match cfg.split {
        SplitPlan::FewshotFolds { k, per_class } => make_fewshot_folds(&pool, k, per_class, cfg.seeds.split_seed),
        SplitPlan::Stratified { ratios } => make_stratified_split(&pool, ratios, cfg.seeds.split_seed),
    }
    .stage("split")?;
    let Some(fold) = manifest.folds.get(cfg.fold) else {
        return fail("split", format!("fold {} does not exist", cfg.fold));
    };
    let source: Vec<String> = fold.train_ids.iter().chain(&fold.val_ids).cloned().collect();
    let splits = make_train_val(
        &pool,
        &source,
        cfg.splits_per_fold,
        cfg.train_ratio,
        derive_seed(cfg.seeds.split_seed, cfg.fold as u64),
    )
    .stage("split")?;
    let Some(tv) = splits.get(cfg.split_index) else {
        return fail("split", format!("split {} does not exist", cfg.split_index));
    };

    let index = d.id_index();
    let to_idx = |ids: &[String]| -> Vec<usize> { ids.iter().map(|id| index[id.as_str()]).collect() };
    let train = to_idx(&tv.train_ids);
    let val = to_idx(&tv.val_ids);
    let used: BTreeSet<usize> = train.iter().chain(&val).copied().collect();
    let mut populations = Vec::new();
    for name in &cfg.test_partitions {
        let idx: Vec<usize> = if name == LEFTOVER {
            to_idx(&fold.test_ids)
        } else {
            (0..d.len())
                .filter(|i| d.records()[*i].partition.as_deref() == Some(name.as_str()) && !used.contains(i))
                .collect()
        };
        if idx.is_empty() {
            return fail("split", format!("test population {name} is empty"));
        }
        populations.push((name.clone(), idx));
    }
    let classes = pool.labels();
    log.push(format!(
        "split: {} train, {} val, classes {:?}, populations {:?}",
        train.len(),
        val.len(),
        classes,
        populations
            .iter()
            .map(|(n, i)| (n.as_str(), i.len()))
            .collect::<Vec<_>>()
    ));
    Ok(Prepared {
        data: d,
        classes,
        train,
        val,
        populations,
    })
}

fn labeled(p: &Prepared, idx: &[usize], fp: &FlowpicConfig) -> Result<LabeledImages, StageError> {
    let labels = idx.iter().map(|&i| p.label_of(i)).collect::<Result<Vec<_>, _>>()?;
    let images = idx.iter().map(|&i| fp.image(&p.data.records()[i].series)).collect();
    Ok(LabeledImages { images, labels })
}

fn score(p: &Prepared, net: &Network<f32>, idx: &[usize], fp: &FlowpicConfig) -> Result<MetricSet, StageError> {
    let data = labeled(p, idx, fp)?;
    let eval = evaluate(net, &data.images).stage("evaluate")?;
    compute_metrics(&data.labels, &eval.predictions, p.classes.len()).stage("evaluate")
}

fn run_supervised(
    cfg: &ExperimentConfig,
    p: &Prepared,
    dir: Option<&Path>,
    log: &mut Vec<String>,
) -> Result<Outputs, StageError> {
    let fp = cfg.flowpic();
    let spec = cfg.augmentation.unwrap_or(AugmentationSpec::NoAug);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.aug_seed);
    let images = expand_training_set(&p.series(&p.train), &spec, cfg.times, &fp, &mut rng).stage("augment")?;
    let base = p.train.iter().map(|&i| p.label_of(i)).collect::<Result<Vec<_>, _>>()?;
    let labels = base.iter().flat_map(|&l| std::iter::repeat_n(l, cfg.times)).collect();
    let train = LabeledImages { images, labels };
    let val = labeled(p, &p.val, &fp)?;
    log.push(format!("augment: {} training images ({})", train.len(), spec.name()));

    let net_cfg = NetworkConfig::supervised(cfg.resolution, p.classes.len(), cfg.with_dropout);
    let net = Network::new(net_cfg, cfg.seeds.init_seed).stage("train")?;
    let tc = cfg
        .train
        .unwrap_or_else(TrainConfig::supervised)
        .with_seed(cfg.seeds.init_seed);
    let out = train_supervised(net, &train, &val, &tc).stage("train")?;
    for e in &out.history {
        log.push(format!(
            "epoch {}: train_loss {:.6} val_loss {:.6}",
            e.epoch,
            e.train_loss,
            e.val_loss.unwrap_or(f64::NAN)
        ));
    }
    log.push(format!("train: best epoch {} of {}", out.best_epoch, out.epochs_run));
    let checkpoint = save_checkpoint(&out.checkpoint, dir)?;

    let mut metrics = BTreeMap::new();
    for (name, idx) in &p.populations {
        metrics.insert(name.clone(), score(p, &out.network, idx, &fp)?);
    }
    Ok(Outputs { metrics, checkpoint })
}

fn save_checkpoint(ck: &Checkpoint, dir: Option<&Path>) -> Result<Option<PathBuf>, StageError> {
    match dir {
        Some(d) => {
            let path = d.join("checkpoint.bin");
            ck.save(&path).stage("checkpoint")?;
            Ok(Some(path))
        }
        None => Ok(None),
    }
}

fn run_simclr(
    cfg: &ExperimentConfig,
    p: &Prepared,
    dir: Option<&Path>,
    log: &mut Vec<String>,
) -> Result<Outputs, StageError> {
    let fp = cfg.flowpic();
    let Some(pair) = cfg.augmentation_pair else {
        return fail("pretrain", "augmentation_pair is required");
    };
    let Some(proj) = cfg.projection_dim else {
        return fail("pretrain", "projection_dim is required");
    };
    let unlabeled: Vec<usize> = p.train.iter().chain(&p.val).copied().collect();
    let net_cfg = NetworkConfig::simclr(cfg.resolution, p.classes.len(), cfg.with_dropout, proj);
    let net = Network::new(net_cfg, cfg.seeds.init_seed).stage("pretrain")?;
    let tc = cfg
        .train
        .unwrap_or_else(TrainConfig::simclr)
        .with_seed(cfg.seeds.init_seed);
    let pre = pretrain_simclr(net, &p.series(&unlabeled), (pair[0], pair[1]), &fp, &tc).stage("pretrain")?;
    for e in &pre.history {
        log.push(format!(
            "epoch {}: loss {:.6} top{} {:.4}",
            e.epoch,
            e.train_loss,
            tc.top_k,
            e.metric.unwrap_or(f64::NAN)
        ));
    }
    log.push(format!("pretrain: best epoch {} of {}", pre.best_epoch, pre.epochs_run));
    let checkpoint = save_checkpoint(&pre.checkpoint, dir)?;

    let fc = cfg
        .finetune_train
        .unwrap_or_else(TrainConfig::finetune)
        .with_seed(cfg.seeds.init_seed);
    let mut metrics = BTreeMap::new();
    for (k, (name, idx)) in p.populations.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seeds.aug_seed, k as u64 + 1));
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in idx {
            by_class.entry(p.label_of(i)?).or_default().push(i);
        }
        let (mut shots, mut rest) = (Vec::new(), Vec::new());
        for (c, mut members) in by_class {
            if members.len() <= cfg.finetune_per_class {
                return fail(
                    "finetune",
                    format!(
                        "population {name}: class {} has {} flows, need more than {}",
                        p.classes[c],
                        members.len(),
                        cfg.finetune_per_class
                    ),
                );
            }
            members.shuffle(&mut rng);
            shots.extend_from_slice(&members[..cfg.finetune_per_class]);
            rest.extend_from_slice(&members[cfg.finetune_per_class..]);
        }
        let train = labeled(p, &shots, &fp)?;
        let ft = finetune(&pre.network, p.classes.len(), &train, &fc).stage("finetune")?;
        log.push(format!(
            "finetune {name}: {} shots, best epoch {} of {}",
            shots.len(),
            ft.best_epoch,
            ft.epochs_run
        ));
        rest.sort_unstable();
        metrics.insert(name.clone(), score(p, &ft.network, &rest, &fp)?);
    }
    Ok(Outputs { metrics, checkpoint })
}

fn run_boost(
    cfg: &ExperimentConfig,
    p: &Prepared,
    dir: Option<&Path>,
    log: &mut Vec<String>,
) -> Result<Outputs, StageError> {
    let source = cfg.boost_features.unwrap_or_default();
    let params = cfg.boost.unwrap_or_default();
    let features = |idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&i| boost::extract_features(&p.data.records()[i], &source))
            .collect()
    };
    let labels = p.train.iter().map(|&i| p.label_of(i)).collect::<Result<Vec<_>, _>>()?;
    let model = boost::fit(&features(&p.train), &labels, &params).stage("fit")?;
    log.push(format!(
        "fit: {} rounds, max depth {}, final train log-loss {:.6}",
        model.trees.len(),
        model.max_depth(),
        model.train_log_loss.last().copied().unwrap_or(f64::NAN)
    ));
    let checkpoint = match dir {
        Some(d) => {
            let path = d.join("model.json");
            fs::write(&path, model.to_json()).stage("checkpoint")?;
            Some(path)
        }
        None => None,
    };
    let mut metrics = BTreeMap::new();
    for (name, idx) in &p.populations {
        let y = idx.iter().map(|&i| p.label_of(i)).collect::<Result<Vec<_>, _>>()?;
        let mut pred = model.predict_labels(&features(idx)).stage("evaluate")?;
        // The model only knows classes up to the largest training label.
        pred.iter_mut().for_each(|l| *l = (*l).min(p.classes.len() - 1));
        metrics.insert(
            name.clone(),
            compute_metrics(&y, &pred, p.classes.len()).stage("evaluate")?,
        );
    }
    Ok(Outputs { metrics, checkpoint })
}

/// Runs one experiment against an already loaded (and curated) dataset.
///
/// With `dir` set, config.json, split.json, log.txt, the checkpoint and (on
/// success) metrics.json are written there.
pub fn run_experiment_on(cfg: &ExperimentConfig, data: &Dataset, dir: Option<&Path>) -> RunRecord {
    let start = Instant::now();
    let mut log = vec![format!("experiment {} ({}, {})", cfg.id, cfg.method, cfg.variant)];
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<Outputs, StageError> {
        if let Some(d) = dir {
            fs::create_dir_all(d).stage("setup")?;
            let json = serde_json::to_string_pretty(cfg).stage("setup")?;
            fs::write(d.join("config.json"), json + "\n").stage("setup")?;
        }
        let p = prepare(cfg, data, &mut log)?;
        if let Some(d) = dir {
            let ids =
                |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| data.records()[i].flow_id.clone()).collect() };
            let split = serde_json::json!({ "train_ids": ids(&p.train), "val_ids": ids(&p.val) });
            fs::write(d.join("split.json"), split.to_string() + "\n").stage("setup")?;
        }
        match cfg.method {
            Method::Supervised => run_supervised(cfg, &p, dir, &mut log),
            Method::SimclrFinetune => run_simclr(cfg, &p, dir, &mut log),
            Method::BoostBaseline => run_boost(cfg, &p, dir, &mut log),
        }
    }))
    .unwrap_or_else(|panic| {
        let message = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        fail("panic", message)
    });
    finish(cfg, dir, result, start, log)
}

fn finish(
    cfg: &ExperimentConfig,
    dir: Option<&Path>,
    result: Result<Outputs, StageError>,
    start: Instant,
    mut log: Vec<String>,
) -> RunRecord {
    let (status, metrics, checkpoint) = match result {
        Ok(o) => (RunStatus::Completed, Some(o.metrics), o.checkpoint),
        Err(e) => {
            log.push(format!("failed at {}: {}", e.stage, e.message));
            (
                RunStatus::Failed {
                    stage: e.stage.into(),
                    message: e.message,
                },
                None,
                None,
            )
        }
    };
    let mut status = status;
    let mut log_path = None;
    if let Some(d) = dir {
        if let Some(m) = &metrics {
            let json = serde_json::to_string_pretty(m).expect("metrics serialize");
            if let Err(e) = fs::create_dir_all(d).and_then(|_| fs::write(d.join("metrics.json"), json + "\n")) {
                status = RunStatus::Failed {
                    stage: "write".into(),
                    message: e.to_string(),
                };
            }
        }
        let path = d.join("log.txt");
        if fs::create_dir_all(d)
            .and_then(|_| fs::write(&path, log.join("\n") + "\n"))
            .is_ok()
        {
            log_path = Some(path);
        }
    }
    let completed = status == RunStatus::Completed;
    RunRecord {
        id: cfg.id.clone(),
        index: cfg.index,
        config_hash: cfg.config_hash(),
        status,
        metrics: if completed { metrics } else { None },
        wall_time_s: start.elapsed().as_secs_f64(),
        checkpoint,
        log: log_path,
    }
}

/// Loads the experiment's dataset, then runs it.
pub fn run_experiment(cfg: &ExperimentConfig, dir: Option<&Path>) -> RunRecord {
    match prepare_dataset(&cfg.dataset, &cfg.curation) {
        Ok(d) => run_experiment_on(cfg, &d, dir),
        Err(e) => finish(
            cfg,
            dir,
            fail("load", e.to_string()),
            Instant::now(),
            vec![format!("experiment {}", cfg.id)],
        ),
    }
}

/// Runs every experiment of `plan` on `workers` threads and writes the
/// campaign layout under `out`. Records come back in plan order and do not
/// depend on the worker count (apart from wall times).
pub fn run_campaign(plan: &[ExperimentConfig], workers: usize, out: &Path) -> Result<Vec<RunRecord>, CampaignError> {
    if workers == 0 {
        return grid_err("workers must be >= 1");
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let plan_json = serde_json::to_string_pretty(plan).expect("plan serializes");
    write_file(&out.join("plan.json"), plan_json + "\n")?;

    let mut datasets: HashMap<(PathBuf, Curation), Result<Arc<Dataset>, String>> = HashMap::new();
    for cfg in plan {
        let key = (cfg.dataset.clone(), cfg.curation.clone());
        datasets.entry(key).or_insert_with(|| {
            prepare_dataset(&cfg.dataset, &cfg.curation)
                .map(Arc::new)
                .map_err(|e| e.to_string())
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CampaignError::Grid(format!("thread pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| {
        plan.par_iter()
            .map(|cfg| {
                let dir = out.join(&cfg.id);
                match &datasets[&(cfg.dataset.clone(), cfg.curation.clone())] {
                    Ok(d) => run_experiment_on(cfg, d, Some(&dir)),
                    Err(e) => finish(
                        cfg,
                        Some(&dir),
                        fail("load", e.clone()),
                        Instant::now(),
                        vec![format!("experiment {}", cfg.id)],
                    ),
                }
            })
            .collect()
    });
    let runs = serde_json::to_string_pretty(&records).expect("records serialize");
    write_file(&out.join("runs.json"), runs + "\n")?;
    Ok(records)
}

/// Reads plan.json and runs.json of a campaign directory.
pub fn load_campaign(dir: &Path) -> Result<(Vec<ExperimentConfig>, Vec<RunRecord>), CampaignError> {
    let read = |name: &str| -> Result<String, CampaignError> {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(io_err(&p))
    };
    let parse = |name: &str, e: serde_json::Error| CampaignError::Parse {
        path: dir.join(name),
        message: e.to_string(),
    };
    let plan = serde_json::from_str(&read("plan.json")?).map_err(|e| parse("plan.json", e))?;
    let runs = serde_json::from_str(&read("runs.json")?).map_err(|e| parse("runs.json", e))?;
    Ok((plan, runs))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: Method,
    pub variant: String,
    pub resolution: usize,
    pub with_dropout: bool,
    pub projection_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    #[serde(flatten)]
    pub key: CellKey,
    pub partition: String,
    pub planned: usize,
    /// Completed runs contributing to the cell.
    pub n: usize,
    pub accuracy_mean: Option<f64>,
    /// Half width of the 95% t interval; absent when n < 2.
    pub accuracy_ci: Option<f64>,
    pub weighted_f1_mean: Option<f64>,
    pub weighted_f1_ci: Option<f64>,
    /// Mean of the row-normalized confusion matrices.
    pub mean_confusion: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Trials of one resolution.
    PerResolution(usize),
    /// Trials of every resolution pooled together.
    Pooled,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pooling::PerResolution(r) => write!(f, "res{r}"),
            Pooling::Pooled => f.write_str("pooled"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAnalysis {
    pub method: Method,
    pub partition: String,
    pub pooling: Pooling,
    /// Number of trials (blocks) ranked.
    pub trials: usize,
    pub table: RankTable,
    pub alpha: f64,
    pub critical_distance: Option<f64>,
    /// Groups of variants (by name) that are not significantly different.
    pub groups: Vec<Vec<String>>,
}

impl RankAnalysis {
    pub fn file_stem(&self) -> String {
        let safe: String = self
            .partition
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        format!("ranks_{}_{}_{}", self.method, safe, self.pooling)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub id: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub name: String,
    pub planned: usize,
    pub completed: usize,
    pub failed: usize,
    pub cells: Vec<CellSummary>,
    pub rankings: Vec<RankAnalysis>,
    pub failures: Vec<FailureRow>,
}

fn mean_ci(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let ci = t_confidence_interval(values, 0.95).ok().map(|(_, h)| h);
    (Some(mean(values)), ci)
}

/// Aggregates run records into per-cell statistics and rank analyses
/// across the variant axis of each method.
pub fn summarize(
    plan: &[ExperimentConfig],
    records: &[RunRecord],
    alpha: f64,
) -> Result<CampaignReport, CampaignError> {
    let by_id: HashMap<&str, &RunRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let name = plan.first().map_or_else(String::new, |c| c.campaign.clone());

    let mut cell_order: Vec<(CellKey, String)> = Vec::new();
    let mut cell_runs: HashMap<(CellKey, String), (usize, Vec<&MetricSet>)> = HashMap::new();
    for cfg in plan {
        for part in &cfg.test_partitions {
            let key = (cfg.cell_key(), part.clone());
            let entry = cell_runs.entry(key.clone()).or_insert_with(|| {
                cell_order.push(key.clone());
                (0, Vec::new())
            });
            entry.0 += 1;
            if let Some(m) = by_id
                .get(cfg.id.as_str())
                .and_then(|r| r.metrics.as_ref())
                .and_then(|m| m.get(part))
            {
                entry.1.push(m);
            }
        }
    }

    let mut cells = Vec::new();
    for key in &cell_order {
        let (planned, runs) = &cell_runs[key];
        let acc: Vec<f64> = runs.iter().map(|m| m.accuracy).collect();
        let f1: Vec<f64> = runs.iter().map(|m| m.weighted_f1).collect();
        let (accuracy_mean, accuracy_ci) = mean_ci(&acc);
        let (weighted_f1_mean, weighted_f1_ci) = mean_ci(&f1);
        let mean_confusion = (!runs.is_empty()).then(|| {
            let mats: Vec<Vec<Vec<f64>>> = runs.iter().map(|m| m.row_normalized_confusion()).collect();
            let c = mats[0].len();
            (0..c)
                .map(|i| {
                    (0..c)
                        .map(|j| mats.iter().map(|m| m[i][j]).sum::<f64>() / mats.len() as f64)
                        .collect()
                })
                .collect()
        });
        cells.push(CellSummary {
            key: key.0.clone(),
            partition: key.1.clone(),
            planned: *planned,
            n: runs.len(),
            accuracy_mean,
            accuracy_ci,
            weighted_f1_mean,
            weighted_f1_ci,
            mean_confusion,
        });
    }

    let mut rankings = Vec::new();
    for method in [Method::Supervised, Method::SimclrFinetune] {
        let runs: Vec<&ExperimentConfig> = plan.iter().filter(|c| c.method == method).collect();
        let mut variants: Vec<String> = Vec::new();
        for c in &runs {
            if !variants.contains(&c.variant) {
                variants.push(c.variant.clone());
            }
        }
        if variants.len() < 2 {
            continue;
        }
        let resolutions: BTreeSet<usize> = runs.iter().map(|c| c.resolution).collect();
        let mut modes: Vec<Pooling> = resolutions.iter().map(|&r| Pooling::PerResolution(r)).collect();
        if resolutions.len() > 1 {
            modes.push(Pooling::Pooled);
        }
        let partitions: BTreeSet<&String> = runs.iter().flat_map(|c| &c.test_partitions).collect();
        for part in partitions {
            for mode in &modes {
                // Block key: every axis except the variant.
                type Block = (usize, bool, Option<usize>, usize, usize);
                let mut blocks: BTreeMap<Block, BTreeMap<&str, f64>> = BTreeMap::new();
                for c in &runs {
                    if matches!(mode, Pooling::PerResolution(r) if *r != c.resolution) {
                        continue;
                    }
                    let Some(acc) = by_id
                        .get(c.id.as_str())
                        .and_then(|r| r.metrics.as_ref())
                        .and_then(|m| m.get(part))
                        .map(|m| m.accuracy)
                    else {
                        continue;
                    };
                    blocks
                        .entry((c.resolution, c.with_dropout, c.projection_dim, c.fold, c.split_index))
                        .or_default()
                        .insert(c.variant.as_str(), acc);
                }
                let complete: Vec<&BTreeMap<&str, f64>> =
                    blocks.values().filter(|b| b.len() == variants.len()).collect();
                if complete.is_empty() {
                    continue;
                }
                let observations: Vec<Vec<f64>> = variants
                    .iter()
                    .map(|v| complete.iter().map(|b| b[v.as_str()]).collect())
                    .collect();
                let table = rank_methods(variants.clone(), observations)?;
                let cd = nemenyi_cd(variants.len(), complete.len(), alpha).ok();
                let groups = cd
                    .map(|cd| {
                        cd_groups(&table, cd)
                            .into_iter()
                            .map(|g| g.into_iter().map(|i| variants[i].clone()).collect())
                            .collect()
                    })
                    .unwrap_or_default();
                rankings.push(RankAnalysis {
                    method,
                    partition: part.clone(),
                    pooling: mode.clone(),
                    trials: complete.len(),
                    table,
                    alpha,
                    critical_distance: cd,
                    groups,
                });
            }
        }
    }

    let failures: Vec<FailureRow> = records
        .iter()
        .filter_map(|r| match &r.status {
            RunStatus::Failed { stage, message } => Some(FailureRow {
                id: r.id.clone(),
                stage: stage.clone(),
                message: message.clone(),
            }),
            RunStatus::Completed => None,
        })
        .collect();
    let completed = records.iter().filter(|r| r.is_completed()).count();
    Ok(CampaignReport {
        name,
        planned: plan.len(),
        completed,
        failed: plan.len() - completed,
        cells,
        rankings,
        failures,
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.digits$}"))
}

fn fmt_mean_ci(m: Option<f64>, ci: Option<f64>) -> String {
    match (m, ci) {
        (None, _) => "n/a".into(),
        (Some(m), Some(ci)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * ci),
        (Some(m), None) => format!("{:.2} ± n/a", 100.0 * m),
    }
}

impl CampaignReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Campaign {}\n", self.name);
        let _ = writeln!(
            s,
            "{} planned, {} completed, {} failed.\n",
            self.planned, self.completed, self.failed
        );
        let _ = writeln!(s, "## Cells\n");
        let _ = writeln!(
            s,
            "Accuracy and weighted F1 in percent, mean ± 95% t-interval half width.\n"
        );
        let _ = writeln!(
            s,
            "| method | variant | resolution | dropout | projection | partition | n | accuracy | weighted F1 |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {}/{} | {} | {} |",
                c.key.method,
                c.key.variant,
                c.key.resolution,
                c.key.with_dropout,
                c.key.projection_dim.map_or_else(|| "-".into(), |p| p.to_string()),
                c.partition,
                c.n,
                c.planned,
                fmt_mean_ci(c.accuracy_mean, c.accuracy_ci),
                fmt_mean_ci(c.weighted_f1_mean, c.weighted_f1_ci),
            );
        }
        for r in &self.rankings {
            let _ = writeln!(
                s,
                "\n## Ranks: {} on {} ({}, N = {})\n",
                r.method, r.partition, r.pooling, r.trials
            );
            let _ = writeln!(
                s,
                "Critical distance at alpha {}: {}\n",
                r.alpha,
                fmt_opt(r.critical_distance, 3)
            );
            let _ = writeln!(s, "| variant | average rank |");
            let _ = writeln!(s, "|---|---|");
            for i in r.table.order() {
                let _ = writeln!(s, "| {} | {:.3} |", r.table.methods[i], r.table.average_ranks[i]);
            }
            if !r.groups.is_empty() {
                let _ = writeln!(s, "\nNot significantly different:\n");
                for g in &r.groups {
                    let _ = writeln!(s, "- {}", g.join(", "));
                }
            }
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "\n## Failures\n");
            for f in &self.failures {
                let _ = writeln!(s, "- {} at {}: {}", f.id, f.stage, f.message);
            }
        }
        s
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from(
            "method,variant,resolution,dropout,projection_dim,partition,planned,n,accuracy_mean,accuracy_ci,weighted_f1_mean,weighted_f1_ci\n",
        );
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                c.key.method,
                csv_field(&c.key.variant),
                c.key.resolution,
                c.key.with_dropout,
                c.key.projection_dim.map_or_else(String::new, |p| p.to_string()),
                csv_field(&c.partition),
                c.planned,
                c.n,
                opt(c.accuracy_mean),
                opt(c.accuracy_ci),
                opt(c.weighted_f1_mean),
                opt(c.weighted_f1_ci),
            );
        }
        s
    }

    /// Writes summary.md, cells.csv, summary.json and, per rank analysis, a
    /// CSV of average ranks and an SVG critical-distance diagram.
    pub fn write(&self, dir: &Path) -> Result<(), CampaignError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_file(&dir.join("summary.md"), self.to_markdown())?;
        write_file(&dir.join("cells.csv"), self.cells_csv())?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        write_file(&dir.join("summary.json"), json + "\n")?;
        for r in &self.rankings {
            let stem = r.file_stem();
            write_file(&dir.join(format!("{stem}.csv")), r.table.to_csv())?;
            if let Some(cd) = r.critical_distance {
                write_file(&dir.join(format!("{stem}.svg")), cd_diagram_svg(&r.table, cd))?;
            }
        }
        Ok(())
    }
}

/// Writes per-partition mean flowpics and packet-size densities of `data`
/// into `dir`. Untagged datasets are treated as a single partition `all`.
pub fn write_drift_report(data: &Dataset, resolution: usize, window: f64, dir: &Path) -> Result<(), CampaignError> {
    let names = data.partitions();
    let parts: Vec<(String, Dataset)> = if names.is_empty() {
        vec![("all".into(), data.clone())]
    } else {
        names.iter().map(|n| (n.clone(), data.partition(n))).collect()
    };
    let refs: Vec<(String, &Dataset)> = parts.iter().map(|(n, d)| (n.clone(), d)).collect();
    let report = drift_diagnostics(&refs, resolution, window)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("drift_kde.csv"), report.kde_csv())?;
    for e in &report.entries {
        let file = format!("mean_flowpic_{}_{}.csv", e.partition, e.label)
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "._-".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .collect::<String>();
        write_file(&dir.join(file), report.mean_flowpic_csv(e))?;
    }
    Ok(())
}

/// Convenience for building images of a record subset.
pub fn images_of(data: &Dataset, idx: &[usize], fp: &FlowpicConfig) -> Vec<Image> {
    idx.iter().map(|&i| fp.image(&data.records()[i].series)).collect()
}
