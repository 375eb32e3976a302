//! Python module `tclab`: datasets, flowpics, augmentations, CNN training,
//! the boosted-tree baseline, ranking statistics and campaigns.
//!
//! Class indices always follow the sorted labels of the dataset passed in.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tclab_core::augment::{apply_timeseries, expand_training_set, AugmentationSpec};
use tclab_core::boost::{self, BoostParams, FeatureSource};
use tclab_core::campaign::{load_grid, plan_campaign as plan, run_campaign as run, summarize};
use tclab_core::dataio::{self, Dataset, PacketSeries};
use tclab_core::flowpic::{FlowpicConfig, Image, Normalization};
use tclab_core::nn::{self, Checkpoint, CheckpointMetadata, EpochRecord, LabeledImages, NetworkConfig, TrainConfig};
use tclab_core::stats::{self, MetricSet};

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: impl Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn spec(s: &str) -> PyResult<AugmentationSpec> {
    s.parse().map_err(value_err)
}

fn normalization(s: &str) -> PyResult<Normalization> {
    match s {
        "raw" => Ok(Normalization::Raw),
        "unit_max" => Ok(Normalization::UnitMax),
        _ => Err(value_err(format!("unknown normalization {s:?}"))),
    }
}

fn flowpic_config(resolution: usize, window: f64, norm: &str) -> PyResult<FlowpicConfig> {
    if resolution < 2 || !(window > 0.0 && window.is_finite()) {
        return Err(value_err("resolution must be >= 2 and window positive"));
    }
    Ok(FlowpicConfig {
        resolution,
        window,
        normalization: normalization(norm)?,
    })
}

fn image_rows(img: &Image) -> Vec<Vec<f32>> {
    img.data.chunks(img.size).map(<[f32]>::to_vec).collect()
}

/// Arrival times (s), sizes (bytes) and optional directions of one flow.
#[pyclass(name = "PacketSeries", module = "tclab", from_py_object)]
#[derive(Clone)]
struct PySeries {
    inner: PacketSeries,
}

#[pymethods]
impl PySeries {
    /// Raw input is rebased to start at 0 and sizes above 1500 are clipped.
    #[new]
    #[pyo3(signature = (timestamps, sizes, directions=None))]
    fn new(timestamps: Vec<f64>, sizes: Vec<u64>, directions: Option<Vec<i64>>) -> PyResult<Self> {
        let (inner, _) = PacketSeries::from_raw(&timestamps, &sizes, directions.as_deref()).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn timestamps(&self) -> Vec<f64> {
        self.inner.timestamps().to_vec()
    }

    #[getter]
    fn sizes(&self) -> Vec<u32> {
        self.inner.sizes().to_vec()
    }

    #[getter]
    fn directions(&self) -> Option<Vec<i8>> {
        self.inner.directions().map(<[i8]>::to_vec)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PacketSeries(len={})", self.inner.len())
    }
}

/// A labeled flow dataset (JSON Lines on disk).
#[pyclass(name = "Dataset", module = "tclab", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dataio::load_dataset(&path).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: dataio::parse_dataset(text).map_err(value_err)?,
        })
    }

    /// `flows` holds `(flow_id, label, partition, series)` tuples.
    #[staticmethod]
    fn from_flows(flows: Vec<(String, String, Option<String>, PySeries)>) -> PyResult<Self> {
        let records = flows
            .into_iter()
            .map(|(flow_id, label, partition, s)| dataio::FlowRecord {
                flow_id,
                label,
                partition,
                series: s.inner,
            })
            .collect();
        Ok(Self {
            inner: Dataset::from_records(records).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(flows={}, classes={})",
            self.inner.len(),
            self.inner.class_index().len()
        )
    }

    /// Sorted class labels; position = class index.
    fn labels(&self) -> Vec<String> {
        self.inner.labels()
    }

    fn flow_ids(&self) -> Vec<String> {
        self.inner.records().iter().map(|r| r.flow_id.clone()).collect()
    }

    fn partitions(&self) -> Vec<String> {
        self.inner.partitions()
    }

    fn partition(&self, name: &str) -> Self {
        Self {
            inner: self.inner.partition(name),
        }
    }

    fn class_counts(&self) -> HashMap<String, usize> {
        self.inner
            .class_index()
            .iter()
            .map(|(k, v)| (k.clone(), v.len()))
            .collect()
    }

    fn label(&self, flow_id: &str) -> PyResult<String> {
        Ok(self.record(flow_id)?.label.clone())
    }

    fn series(&self, flow_id: &str) -> PyResult<PySeries> {
        Ok(PySeries {
            inner: self.record(flow_id)?.series.clone(),
        })
    }

    fn filter_min_packets(&self, n: usize) -> Self {
        Self {
            inner: dataio::filter_min_packets(&self.inner, n),
        }
    }

    fn filter_min_class_size(&self, m: usize) -> Self {
        Self {
            inner: dataio::filter_min_class_size(&self.inner, m),
        }
    }
}

impl PyDataset {
    fn record(&self, id: &str) -> PyResult<&dataio::FlowRecord> {
        self.inner
            .get(id)
            .ok_or_else(|| value_err(format!("unknown flow {id:?}")))
    }

    fn class_of(&self, id: &str) -> PyResult<usize> {
        let label = &self.record(id)?.label;
        Ok(self.inner.labels().binary_search(label).expect("label is indexed"))
    }

    fn labeled(&self, ids: &[String], fp: &FlowpicConfig) -> PyResult<LabeledImages> {
        let mut images = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            images.push(fp.image(&self.record(id)?.series));
            labels.push(self.class_of(id)?);
        }
        Ok(LabeledImages { images, labels })
    }
}

/// Accuracy, weighted and macro F1, and the confusion matrix.
#[pyclass(name = "Metrics", module = "tclab", skip_from_py_object)]
struct PyMetrics {
    inner: MetricSet,
}

#[pymethods]
impl PyMetrics {
    #[getter]
    fn accuracy(&self) -> f64 {
        self.inner.accuracy
    }

    #[getter]
    fn weighted_f1(&self) -> f64 {
        self.inner.weighted_f1
    }

    #[getter]
    fn macro_f1(&self) -> f64 {
        self.inner.macro_f1
    }

    /// `confusion[true][predicted]` counts.
    #[getter]
    fn confusion(&self) -> Vec<Vec<u64>> {
        self.inner.confusion.clone()
    }

    fn row_normalized_confusion(&self) -> Vec<Vec<f64>> {
        self.inner.row_normalized_confusion()
    }

    fn __repr__(&self) -> String {
        format!(
            "Metrics(accuracy={:.4}, weighted_f1={:.4})",
            self.inner.accuracy, self.inner.weighted_f1
        )
    }
}

/// A CNN in supervised, contrastive pre-training or fine-tuning mode.
#[pyclass(name = "Network", module = "tclab", skip_from_py_object)]
struct PyNetwork {
    inner: nn::Network<f32>,
    history: Vec<EpochRecord>,
    flowpic: FlowpicConfig,
}

#[pymethods]
impl PyNetwork {
    /// `mode` is `supervised`, `simclr` or `finetune`.
    #[new]
    #[pyo3(signature = (mode="supervised", resolution=32, num_classes=5, dropout=false, projection_dim=30, seed=0))]
    fn new(
        mode: &str,
        resolution: usize,
        num_classes: usize,
        dropout: bool,
        projection_dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = match mode {
            "supervised" => NetworkConfig::supervised(resolution, num_classes, dropout),
            "simclr" => NetworkConfig::simclr(resolution, num_classes, dropout, projection_dim),
            "finetune" => NetworkConfig::finetune(resolution, num_classes, projection_dim),
            _ => return Err(value_err(format!("unknown mode {mode:?}"))),
        };
        Ok(Self {
            inner: nn::Network::new(config, seed).map_err(value_err)?,
            history: Vec::new(),
            flowpic: FlowpicConfig::with_resolution(resolution),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(value_err)?;
        Ok(Self {
            inner: ck.to_network().map_err(value_err)?,
            flowpic: FlowpicConfig::with_resolution(ck.config.flowpic_dim),
            history: ck.metadata.history,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = CheckpointMetadata {
            seed: 0,
            epoch: self.history.len(),
            history: self.history.clone(),
        };
        Checkpoint::from_network(&self.inner, meta)
            .save(&path)
            .map_err(value_err)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.config().mode {
            nn::NetMode::Supervised => "supervised",
            nn::NetMode::SimclrPretrain => "simclr",
            nn::NetMode::Finetune => "finetune",
        }
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.config().flowpic_dim
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn trainable_param_count(&self) -> usize {
        self.inner.trainable_param_count()
    }

    /// Per-epoch `(train_loss, val_loss, metric)`; missing values are None.
    #[getter]
    fn history(&self) -> Vec<(f64, Option<f64>, Option<f64>)> {
        self.history
            .iter()
            .map(|e| (e.train_loss, e.val_loss, e.metric))
            .collect()
    }

    /// Network outputs for square images given as nested lists.
    fn forward(&self, py: Python<'_>, images: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<f32>>> {
        let imgs = to_images(images)?;
        Ok(py
            .detach(|| nn::evaluate(&self.inner, &imgs))
            .map_err(value_err)?
            .logits)
    }

    /// Predicted class indices for the given flows.
    fn predict(&self, py: Python<'_>, dataset: &PyDataset, ids: Vec<String>) -> PyResult<Vec<usize>> {
        let data = dataset.labeled(&ids, &self.flowpic)?;
        Ok(py
            .detach(|| nn::evaluate(&self.inner, &data.images))
            .map_err(value_err)?
            .predictions)
    }

    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset, ids: Vec<String>) -> PyResult<PyMetrics> {
        let data = dataset.labeled(&ids, &self.flowpic)?;
        let eval = py
            .detach(|| nn::evaluate(&self.inner, &data.images))
            .map_err(value_err)?;
        let inner =
            stats::compute_metrics(&data.labels, &eval.predictions, dataset.inner.labels().len()).map_err(value_err)?;
        Ok(PyMetrics { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(mode={}, resolution={}, params={})",
            self.mode(),
            self.resolution(),
            self.param_count()
        )
    }
}

fn to_images(images: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Image>> {
    images
        .into_iter()
        .map(|rows| {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(value_err("images must be square"));
            }
            Ok(Image::from_vec(n, rows.into_iter().flatten().collect()))
        })
        .collect()
}

fn train_config(base: TrainConfig, max_epochs: Option<usize>, seed: u64) -> PyResult<TrainConfig> {
    let cfg = TrainConfig {
        max_epochs: max_epochs.unwrap_or(base.max_epochs),
        ..base
    }
    .with_seed(seed);
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Flowpic histogram of a series as `resolution` rows of counts (row =
/// packet-size bin, column = time bin).
#[pyfunction]
#[pyo3(signature = (series, resolution=32, window=15.0))]
fn build_flowpic(series: &PySeries, resolution: usize, window: f64) -> PyResult<Vec<Vec<u32>>> {
    flowpic_config(resolution, window, "raw")?;
    let fp = tclab_core::build_flowpic(&series.inner, resolution, window);
    Ok(fp.counts().chunks(resolution).map(<[u32]>::to_vec).collect())
}

/// Applies a time-series augmentation (name or JSON spec).
#[pyfunction]
#[pyo3(signature = (series, augmentation, seed=0))]
fn augment_series(series: &PySeries, augmentation: &str, seed: u64) -> PyResult<PySeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner = apply_timeseries(&series.inner, &spec(augmentation)?, &mut rng).map_err(value_err)?;
    Ok(PySeries { inner })
}

/// Few-shot folds as a list of `{"train_ids", "val_ids", "test_ids"}` dicts.
#[pyfunction]
#[pyo3(signature = (dataset, k=5, per_class=100, seed=0))]
fn make_fewshot_folds(
    dataset: &PyDataset,
    k: usize,
    per_class: usize,
    seed: u64,
) -> PyResult<Vec<HashMap<String, Vec<String>>>> {
    let m = dataio::make_fewshot_folds(&dataset.inner, k, per_class, seed).map_err(value_err)?;
    Ok(m.folds
        .into_iter()
        .map(|f| {
            HashMap::from([
                ("train_ids".to_string(), f.train_ids),
                ("val_ids".to_string(), f.val_ids),
                ("test_ids".to_string(), f.test_ids),
            ])
        })
        .collect())
}

/// `s` stratified `(train_ids, val_ids)` splits of `ids`.
#[pyfunction]
#[pyo3(signature = (dataset, ids, s=3, ratio=0.8, seed=0))]
fn make_train_val(
    dataset: &PyDataset,
    ids: Vec<String>,
    s: usize,
    ratio: f64,
    seed: u64,
) -> PyResult<Vec<(Vec<String>, Vec<String>)>> {
    let splits = dataio::make_train_val(&dataset.inner, &ids, s, ratio, seed).map_err(value_err)?;
    Ok(splits.into_iter().map(|t| (t.train_ids, t.val_ids)).collect())
}

/// Supervised training with early stopping on the validation loss.
#[pyfunction]
#[pyo3(signature = (dataset, train_ids, val_ids, resolution=32, augmentation="no_aug", times=1, dropout=false, max_epochs=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_supervised(
    py: Python<'_>,
    dataset: &PyDataset,
    train_ids: Vec<String>,
    val_ids: Vec<String>,
    resolution: usize,
    augmentation: &str,
    times: usize,
    dropout: bool,
    max_epochs: Option<usize>,
    seed: u64,
) -> PyResult<PyNetwork> {
    let fp = FlowpicConfig::with_resolution(resolution);
    let aug = spec(augmentation)?;
    let cfg = train_config(TrainConfig::supervised(), max_epochs, seed)?;
    let series: Vec<PacketSeries> = train_ids
        .iter()
        .map(|id| Ok(dataset.record(id)?.series.clone()))
        .collect::<PyResult<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = expand_training_set(&series, &aug, times, &fp, &mut rng).map_err(value_err)?;
    let labels = train_ids
        .iter()
        .map(|id| dataset.class_of(id))
        .collect::<PyResult<Vec<_>>>()?
        .into_iter()
        .flat_map(|y| std::iter::repeat_n(y, times))
        .collect();
    let train = LabeledImages { images, labels };
    let val = dataset.labeled(&val_ids, &fp)?;
    let config = NetworkConfig::supervised(resolution, dataset.inner.labels().len(), dropout);
    let net = nn::Network::new(config, seed).map_err(value_err)?;
    let out = py
        .detach(|| nn::train_supervised(net, &train, &val, &cfg))
        .map_err(run_err)?;
    Ok(PyNetwork {
        inner: out.network,
        history: out.history,
        flowpic: fp,
    })
}

/// Contrastive pre-training on the given (unlabeled) flows.
#[pyfunction]
#[pyo3(signature = (dataset, ids, pair=("change_rtt".to_string(), "time_shift".to_string()), resolution=32, projection_dim=30, max_epochs=None, batch_size=32, seed=0))]
#[allow(clippy::too_many_arguments)]
fn pretrain_simclr(
    py: Python<'_>,
    dataset: &PyDataset,
    ids: Vec<String>,
    pair: (String, String),
    resolution: usize,
    projection_dim: usize,
    max_epochs: Option<usize>,
    batch_size: usize,
    seed: u64,
) -> PyResult<PyNetwork> {
    let fp = FlowpicConfig::with_resolution(resolution);
    let pair = (spec(&pair.0)?, spec(&pair.1)?);
    let cfg = train_config(
        TrainConfig {
            batch_size,
            ..TrainConfig::simclr()
        },
        max_epochs,
        seed,
    )?;
    let series: Vec<PacketSeries> = ids
        .iter()
        .map(|id| Ok(dataset.record(id)?.series.clone()))
        .collect::<PyResult<_>>()?;
    let config = NetworkConfig::simclr(resolution, dataset.inner.labels().len(), false, projection_dim);
    let net = nn::Network::new(config, seed).map_err(value_err)?;
    let out = py
        .detach(|| nn::pretrain_simclr(net, &series, pair, &fp, &cfg))
        .map_err(run_err)?;
    Ok(PyNetwork {
        inner: out.network,
        history: out.history,
        flowpic: fp,
    })
}

/// Trains a linear classifier on the frozen backbone of a pre-trained network.
#[pyfunction]
#[pyo3(signature = (pretrained, dataset, train_ids, max_epochs=None, seed=0))]
fn finetune(
    py: Python<'_>,
    pretrained: &PyNetwork,
    dataset: &PyDataset,
    train_ids: Vec<String>,
    max_epochs: Option<usize>,
    seed: u64,
) -> PyResult<PyNetwork> {
    let cfg = train_config(TrainConfig::finetune(), max_epochs, seed)?;
    let train = dataset.labeled(&train_ids, &pretrained.flowpic)?;
    let classes = dataset.inner.labels().len();
    let out = py
        .detach(|| nn::finetune(&pretrained.inner, classes, &train, &cfg))
        .map_err(value_err)?;
    Ok(PyNetwork {
        inner: out.network,
        history: out.history,
        flowpic: pretrained.flowpic,
    })
}

/// Boosted trees on flattened flowpics or early time-series features.
#[pyclass(name = "BoostModel", module = "tclab", skip_from_py_object)]
struct PyBoostModel {
    inner: boost::BoostModel,
    source: FeatureSource,
}

#[pymethods]
impl PyBoostModel {
    fn predict(&self, dataset: &PyDataset, ids: Vec<String>) -> PyResult<Vec<usize>> {
        let x = features(dataset, &ids, &self.source)?;
        self.inner.predict_labels(&x).map_err(value_err)
    }

    fn evaluate(&self, dataset: &PyDataset, ids: Vec<String>) -> PyResult<PyMetrics> {
        let classes = dataset.inner.labels().len();
        let y = ids
            .iter()
            .map(|id| dataset.class_of(id))
            .collect::<PyResult<Vec<_>>>()?;
        let pred: Vec<usize> = self
            .predict(dataset, ids)?
            .into_iter()
            .map(|p| p.min(classes - 1))
            .collect();
        Ok(PyMetrics {
            inner: stats::compute_metrics(&y, &pred, classes).map_err(value_err)?,
        })
    }

    #[getter]
    fn train_log_loss(&self) -> Vec<f64> {
        self.inner.train_log_loss.clone()
    }

    fn max_depth(&self) -> usize {
        self.inner.max_depth()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

fn features(dataset: &PyDataset, ids: &[String], source: &FeatureSource) -> PyResult<Vec<Vec<f64>>> {
    ids.iter()
        .map(|id| Ok(boost::extract_features(dataset.record(id)?, source)))
        .collect()
}

/// `features` is `flowpic` (flattened, at `resolution`) or `early_timeseries`
/// (first `packets` packets).
#[pyfunction]
#[pyo3(signature = (dataset, ids, features="flowpic", resolution=32, packets=10, rounds=100, max_depth=6, learning_rate=0.3))]
#[allow(clippy::too_many_arguments)]
fn fit_boost(
    py: Python<'_>,
    dataset: &PyDataset,
    ids: Vec<String>,
    features: &str,
    resolution: usize,
    packets: usize,
    rounds: usize,
    max_depth: usize,
    learning_rate: f64,
) -> PyResult<PyBoostModel> {
    let source = match features {
        "flowpic" => FeatureSource::FlattenedFlowpic { resolution },
        "early_timeseries" => FeatureSource::EarlyTimeseries { packets },
        _ => return Err(value_err(format!("unknown feature set {features:?}"))),
    };
    source.validate().map_err(value_err)?;
    let params = BoostParams {
        n_rounds: rounds,
        max_depth,
        learning_rate,
        ..Default::default()
    };
    let x = self::features(dataset, &ids, &source)?;
    let y = ids
        .iter()
        .map(|id| dataset.class_of(id))
        .collect::<PyResult<Vec<_>>>()?;
    let inner = py.detach(|| boost::fit(&x, &y, &params)).map_err(value_err)?;
    Ok(PyBoostModel { inner, source })
}

#[pyfunction]
fn compute_metrics(y_true: Vec<usize>, y_pred: Vec<usize>, num_classes: usize) -> PyResult<PyMetrics> {
    Ok(PyMetrics {
        inner: stats::compute_metrics(&y_true, &y_pred, num_classes).map_err(value_err)?,
    })
}

/// Average ranks (1 = best, higher values are better) of each method over
/// trials; `observations[m][t]` is method `m` on trial `t`.
#[pyfunction]
fn rank_methods(methods: Vec<String>, observations: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(stats::rank_methods(methods, observations)
        .map_err(value_err)?
        .average_ranks)
}

/// Friedman chi-square statistic and p-value.
#[pyfunction]
fn friedman(methods: Vec<String>, observations: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    Ok(stats::friedman(
        &stats::rank_methods(methods, observations).map_err(value_err)?,
    ))
}

#[pyfunction]
#[pyo3(signature = (k, n, alpha=0.05))]
fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> PyResult<f64> {
    stats::nemenyi_cd(k, n, alpha).map_err(value_err)
}

/// `(mean, half_width)` of the Student t interval.
#[pyfunction]
#[pyo3(signature = (samples, level=0.95))]
fn t_confidence_interval(samples: Vec<f64>, level: f64) -> PyResult<(f64, f64)> {
    stats::t_confidence_interval(&samples, level).map_err(value_err)
}

/// `(group_a, group_b, mean_diff, p_value, different)` for every pair.
#[pyfunction]
#[pyo3(signature = (groups, alpha=0.05))]
fn tukey_hsd(groups: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<(usize, usize, f64, f64, bool)>> {
    Ok(stats::tukey_hsd(&groups, alpha)
        .map_err(value_err)?
        .into_iter()
        .map(|c| (c.group_a, c.group_b, c.mean_diff, c.p_value, c.different))
        .collect())
}

/// Experiment ids planned by a grid file.
#[pyfunction]
fn plan_campaign(grid: PathBuf) -> PyResult<Vec<String>> {
    let g = load_grid(&grid).map_err(value_err)?;
    Ok(plan(&g).map_err(value_err)?.into_iter().map(|c| c.id).collect())
}

/// Runs a grid into `out` (with the report under `out/report`); returns the
/// numbers of completed and failed experiments.
#[pyfunction]
#[pyo3(signature = (grid, out, workers=1))]
fn run_campaign(py: Python<'_>, grid: PathBuf, out: PathBuf, workers: usize) -> PyResult<(usize, usize)> {
    let g = load_grid(&grid).map_err(value_err)?;
    let experiments = plan(&g).map_err(value_err)?;
    py.detach(|| {
        let records = run(&experiments, workers, &out).map_err(run_err)?;
        let report = summarize(&experiments, &records, g.alpha).map_err(run_err)?;
        report.write(&out.join("report")).map_err(run_err)?;
        Ok((report.completed, report.failed))
    })
}

/// Synthetic dataset with separable classes.
#[pyfunction]
#[pyo3(signature = (num_classes=5, flows_per_class=500, seed=0, partitions=None, drift=0.0))]
fn synthetic_dataset(
    num_classes: usize,
    flows_per_class: usize,
    seed: u64,
    partitions: Option<Vec<String>>,
    drift: f64,
) -> PyResult<PyDataset> {
    let cfg = tclab_core::synth::SynthConfig {
        num_classes,
        flows_per_class,
        partitions: partitions.unwrap_or_default(),
        drift,
        seed,
        ..Default::default()
    };
    Ok(PyDataset {
        inner: tclab_core::synth::generate(&cfg).map_err(value_err)?,
    })
}

/// Model-ready image of a series as nested lists.
#[pyfunction]
#[pyo3(signature = (series, resolution=32, window=15.0, normalization="raw"))]
fn flowpic_image(series: &PySeries, resolution: usize, window: f64, normalization: &str) -> PyResult<Vec<Vec<f32>>> {
    Ok(image_rows(
        &flowpic_config(resolution, window, normalization)?.image(&series.inner),
    ))
}

#[pymodule]
fn tclab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySeries>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMetrics>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyBoostModel>()?;
    m.add_function(wrap_pyfunction!(build_flowpic, m)?)?;
    m.add_function(wrap_pyfunction!(flowpic_image, m)?)?;
    m.add_function(wrap_pyfunction!(augment_series, m)?)?;
    m.add_function(wrap_pyfunction!(make_fewshot_folds, m)?)?;
    m.add_function(wrap_pyfunction!(make_train_val, m)?)?;
    m.add_function(wrap_pyfunction!(train_supervised, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_simclr, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(fit_boost, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(rank_methods, m)?)?;
    m.add_function(wrap_pyfunction!(friedman, m)?)?;
    m.add_function(wrap_pyfunction!(nemenyi_cd, m)?)?;
    m.add_function(wrap_pyfunction!(t_confidence_interval, m)?)?;
    m.add_function(wrap_pyfunction!(tukey_hsd, m)?)?;
    m.add_function(wrap_pyfunction!(plan_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(run_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    Ok(())
}
