//! Flow dataset format, ingestion, curation filters and reproducible splits.
//!
//! Datasets are stored as JSON Lines, one flow per line:
//!
//! ```text
//! {"flow_id": "f1", "label": "youtube", "partition": "pretraining",
//!  "timestamps": [0.0, 0.013], "sizes": [1350, 66], "directions": [-1, 1]}
//! ```
//!
//! `partition` and `directions` may be `null` or absent.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest packet size kept at ingestion; bigger sizes are clipped to it.
pub const MAX_PACKET_SIZE: u32 = 1500;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate flow_id {flow_id:?}")]
    DuplicateId { line: usize, flow_id: String },
    #[error("dataset file {0} contains no flows")]
    EmptyFile(String),
    #[error("invalid packet series: {0}")]
    InvalidSeries(String),
    #[error("class {label:?} has {available} flows, {required} required")]
    InsufficientSamples {
        label: String,
        available: usize,
        required: usize,
    },
    #[error("invalid split parameters: {0}")]
    InvalidParams(String),
    #[error("manifest schema mismatch: {0}")]
    Schema(String),
    #[error("manifest references unknown flow_id {0:?}")]
    UnknownId(String),
}

/// Per-flow sequence of packets: arrival time, size and (optionally) direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketSeries {
    timestamps: Vec<f64>,
    sizes: Vec<u32>,
    directions: Option<Vec<i8>>,
}

impl PacketSeries {
    /// Validates and normalizes raw packet records: timestamps are rebased to
    /// the first packet and sizes above [`MAX_PACKET_SIZE`] are clipped.
    ///
    /// Returns the series together with the number of clipped sizes.
    pub fn from_raw(timestamps: &[f64], sizes: &[u64], directions: Option<&[i64]>) -> Result<(Self, usize), DataError> {
        if timestamps.is_empty() {
            return Err(DataError::InvalidSeries("empty series".into()));
        }
        if timestamps.len() != sizes.len() {
            return Err(DataError::InvalidSeries(format!(
                "{} timestamps but {} sizes",
                timestamps.len(),
                sizes.len()
            )));
        }
        if timestamps.iter().any(|t| !t.is_finite()) {
            return Err(DataError::InvalidSeries("non-finite timestamp".into()));
        }
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(DataError::InvalidSeries("timestamps decrease".into()));
        }
        let origin = timestamps[0];
        let timestamps: Vec<f64> = timestamps.iter().map(|t| t - origin).collect();

        let mut clipped = 0;
        let mut out_sizes = Vec::with_capacity(sizes.len());
        for &s in sizes {
            if s == 0 {
                return Err(DataError::InvalidSeries("zero-length packet".into()));
            }
            if s > MAX_PACKET_SIZE as u64 {
                clipped += 1;
                out_sizes.push(MAX_PACKET_SIZE);
            } else {
                out_sizes.push(s as u32);
            }
        }

        let directions = match directions {
            None => None,
            Some(d) => {
                if d.len() != timestamps.len() {
                    return Err(DataError::InvalidSeries(format!(
                        "{} directions for {} packets",
                        d.len(),
                        timestamps.len()
                    )));
                }
                let mut out = Vec::with_capacity(d.len());
                for &v in d {
                    match v {
                        1 => out.push(1),
                        -1 => out.push(-1),
                        other => {
                            return Err(DataError::InvalidSeries(format!(
                                "direction must be +1 or -1, got {other}"
                            )))
                        }
                    }
                }
                Some(out)
            }
        };

        Ok((
            Self {
                timestamps,
                sizes: out_sizes,
                directions,
            },
            clipped,
        ))
    }

    /// Builds a series from already-normalized parts.
    ///
    /// Unlike [`PacketSeries::from_raw`] the first timestamp is not rebased,
    /// so augmented series (e.g. time-shifted ones) may start after zero.
    /// Timestamps must still be finite, nonnegative and nondecreasing.
    pub fn from_parts(timestamps: Vec<f64>, sizes: Vec<u32>, directions: Option<Vec<i8>>) -> Result<Self, DataError> {
        if timestamps.len() != sizes.len() {
            return Err(DataError::InvalidSeries("length mismatch".into()));
        }
        if let Some(d) = &directions {
            if d.len() != sizes.len() {
                return Err(DataError::InvalidSeries("direction length mismatch".into()));
            }
        }
        if timestamps.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(DataError::InvalidSeries("negative or non-finite timestamp".into()));
        }
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(DataError::InvalidSeries("timestamps decrease".into()));
        }
        if sizes.iter().any(|&s| s == 0 || s > MAX_PACKET_SIZE) {
            return Err(DataError::InvalidSeries("size outside 1..=1500".into()));
        }
        Ok(Self {
            timestamps,
            sizes,
            directions,
        })
    }

    pub fn empty() -> Self {
        Self {
            timestamps: Vec::new(),
            sizes: Vec::new(),
            directions: None,
        }
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }

    pub fn directions(&self) -> Option<&[i8]> {
        self.directions.as_deref()
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Keeps the packets for which `keep(index)` is true, preserving order.
    pub(crate) fn retain_indices(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let mut timestamps = Vec::new();
        let mut sizes = Vec::new();
        let mut directions = self.directions.as_ref().map(|_| Vec::new());
        for i in 0..self.len() {
            if keep(i) {
                timestamps.push(self.timestamps[i]);
                sizes.push(self.sizes[i]);
                if let (Some(out), Some(src)) = (directions.as_mut(), self.directions.as_ref()) {
                    out.push(src[i]);
                }
            }
        }
        Self {
            timestamps,
            sizes,
            directions,
        }
    }

    pub(crate) fn with_timestamps(&self, timestamps: Vec<f64>) -> Self {
        debug_assert_eq!(timestamps.len(), self.sizes.len());
        Self {
            timestamps,
            sizes: self.sizes.clone(),
            directions: self.directions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub flow_id: String,
    pub label: String,
    pub partition: Option<String>,
    pub series: PacketSeries,
}

/// Wire representation of one JSONL line.
#[derive(Debug, Serialize, Deserialize)]
struct FlowLine {
    flow_id: String,
    label: String,
    #[serde(default)]
    partition: Option<String>,
    timestamps: Vec<f64>,
    sizes: Vec<u64>,
    #[serde(default)]
    directions: Option<Vec<i64>>,
}

/// Ordered collection of flows with a label index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<FlowRecord>,
    class_index: BTreeMap<String, Vec<usize>>,
    clipped_sizes: usize,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids and empty labels.
    pub fn from_records(records: Vec<FlowRecord>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.label.is_empty() {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: "empty label".into(),
                });
            }
            if !seen.insert(r.flow_id.as_str()) {
                return Err(DataError::DuplicateId {
                    line: i + 1,
                    flow_id: r.flow_id.clone(),
                });
            }
        }
        Ok(Self::from_unique(records, 0))
    }

    fn from_unique(records: Vec<FlowRecord>, clipped_sizes: usize) -> Self {
        let mut class_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            class_index.entry(r.label.clone()).or_default().push(i);
        }
        Self {
            records,
            class_index,
            clipped_sizes,
        }
    }

    pub fn records(&self) -> &[FlowRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Label → record indices, labels in lexicographic order.
    pub fn class_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.class_index
    }

    /// Sorted class names.
    pub fn labels(&self) -> Vec<String> {
        self.class_index.keys().cloned().collect()
    }

    /// Number of packet sizes clipped to 1500 B while loading.
    pub fn clipped_sizes(&self) -> usize {
        self.clipped_sizes
    }

    pub fn get(&self, flow_id: &str) -> Option<&FlowRecord> {
        self.records.iter().find(|r| r.flow_id == flow_id)
    }

    /// Map flow_id → record index.
    pub fn id_index(&self) -> BTreeMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.flow_id.as_str(), i))
            .collect()
    }

    /// Keeps records matching `pred`; order is preserved.
    pub fn filter(&self, mut pred: impl FnMut(&FlowRecord) -> bool) -> Dataset {
        let records = self.records.iter().filter(|r| pred(r)).cloned().collect();
        Self::from_unique(records, self.clipped_sizes)
    }

    /// Records whose partition tag equals `partition`.
    pub fn partition(&self, partition: &str) -> Dataset {
        self.filter(|r| r.partition.as_deref() == Some(partition))
    }

    /// Distinct partition tags in first-seen order (untagged flows excluded).
    pub fn partitions(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if let Some(p) = &r.partition {
                if !out.contains(p) {
                    out.push(p.clone());
                }
            }
        }
        out
    }

    /// Serializes the dataset back to JSON Lines.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = FlowLine {
                flow_id: r.flow_id.clone(),
                label: r.label.clone(),
                partition: r.partition.clone(),
                timestamps: r.series.timestamps.clone(),
                sizes: r.series.sizes.iter().map(|&s| s as u64).collect(),
                directions: r
                    .series
                    .directions
                    .as_ref()
                    .map(|d| d.iter().map(|&v| v as i64).collect()),
            };
            out.push_str(&serde_json::to_string(&line).expect("flow line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Parses JSON Lines content. Blank lines are skipped.
pub fn parse_dataset(content: &str) -> Result<Dataset, DataError> {
    parse_lines(
        content.lines().map(|l| Ok::<_, std::io::Error>(l.to_string())),
        "<memory>",
    )
}

/// Loads a JSON Lines dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    parse_lines(BufReader::new(file).lines(), &display)
}

fn parse_lines<I>(lines: I, origin: &str) -> Result<Dataset, DataError>
where
    I: Iterator<Item = Result<String, std::io::Error>>,
{
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut clipped_total = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: origin.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: FlowLine = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if raw.label.is_empty() {
            return Err(DataError::Parse {
                line: lineno,
                message: "empty label".into(),
            });
        }
        let (series, clipped) = PacketSeries::from_raw(&raw.timestamps, &raw.sizes, raw.directions.as_deref())
            .map_err(|e| DataError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        if !seen.insert(raw.flow_id.clone()) {
            return Err(DataError::DuplicateId {
                line: lineno,
                flow_id: raw.flow_id,
            });
        }
        clipped_total += clipped;
        records.push(FlowRecord {
            flow_id: raw.flow_id,
            label: raw.label,
            partition: raw.partition,
            series,
        });
    }
    if records.is_empty() {
        return Err(DataError::EmptyFile(origin.to_string()));
    }
    Ok(Dataset::from_unique(records, clipped_total))
}

/// Keeps flows with strictly more than `n` packets.
pub fn filter_min_packets(d: &Dataset, n: usize) -> Dataset {
    d.filter(|r| r.series.len() > n)
}

/// Drops every class with fewer than `m` flows.
pub fn filter_min_class_size(d: &Dataset, m: usize) -> Dataset {
    let keep: HashSet<&str> = d
        .class_index
        .iter()
        .filter(|(_, idx)| idx.len() >= m)
        .map(|(label, _)| label.as_str())
        .collect();
    d.filter(|r| keep.contains(r.label.as_str()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    FewshotFolds,
    TrainVal,
    #[serde(rename = "stratified_801010")]
    Stratified801010,
}

/// Scheme parameters recorded alongside a manifest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fold {
    pub train_ids: Vec<String>,
    #[serde(default)]
    pub val_ids: Vec<String>,
    #[serde(default)]
    pub test_ids: Vec<String>,
}

impl Fold {
    /// True when train, val and test share no id.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.train_ids
            .iter()
            .chain(&self.val_ids)
            .chain(&self.test_ids)
            .all(|id| seen.insert(id.as_str()))
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train_ids.iter().chain(&self.val_ids).chain(&self.test_ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub scheme: SplitScheme,
    pub seed: u64,
    pub params: SplitParams,
    pub folds: Vec<Fold>,
}

impl SplitManifest {
    /// Checks that every id exists in `dataset` and that each fold is disjoint.
    pub fn validate(&self, dataset: &Dataset) -> Result<(), DataError> {
        let ids = dataset.id_index();
        for (i, fold) in self.folds.iter().enumerate() {
            if !fold.is_disjoint() {
                return Err(DataError::Schema(format!("fold {i} parts overlap")));
            }
            for id in fold.all_ids() {
                if !ids.contains_key(id.as_str()) {
                    return Err(DataError::UnknownId(id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        serde_json::from_str(s).map_err(|e| DataError::Schema(e.to_string()))
    }
}

pub fn save_manifest(m: &SplitManifest, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, m.to_json()).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SplitManifest, DataError> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    SplitManifest::from_json(&s)
}

/// Round half up, for nonnegative values.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Samples `k` disjoint groups of `per_class` flows per class, without replacement.
///
/// Fold `i` holds group `i` of every class as `train_ids`; every flow of the
/// dataset outside that group (the "leftover") goes to `test_ids`.
pub fn make_fewshot_folds(d: &Dataset, k: usize, per_class: usize, seed: u64) -> Result<SplitManifest, DataError> {
    if k == 0 || per_class == 0 {
        return Err(DataError::InvalidParams("k and per_class must be positive".into()));
    }
    let required = k * per_class;
    for (label, idx) in &d.class_index {
        if idx.len() < required {
            return Err(DataError::InsufficientSamples {
                label: label.clone(),
                available: idx.len(),
                required,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<HashSet<usize>> = vec![HashSet::new(); k];
    let mut train: Vec<Vec<usize>> = vec![Vec::new(); k];
    for idx in d.class_index.values() {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for (f, chunk) in shuffled.chunks(per_class).take(k).enumerate() {
            let mut chunk = chunk.to_vec();
            chunk.sort_unstable();
            groups[f].extend(chunk.iter().copied());
            train[f].extend(chunk);
        }
    }

    let folds = (0..k)
        .map(|f| Fold {
            train_ids: train[f].iter().map(|&i| d.records[i].flow_id.clone()).collect(),
            val_ids: Vec::new(),
            test_ids: (0..d.len())
                .filter(|i| !groups[f].contains(i))
                .map(|i| d.records[i].flow_id.clone())
                .collect(),
        })
        .collect();

    Ok(SplitManifest {
        scheme: SplitScheme::FewshotFolds,
        seed,
        params: SplitParams {
            k: Some(k),
            per_class: Some(per_class),
            ..Default::default()
        },
        folds,
    })
}

/// One random train/validation split of a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainValSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Splits `ids` randomly `s` times into train/validation, stratified by class.
///
/// Per class, `round_half_up(ratio * n)` flows go to train and the rest to
/// validation. Ids absent from `d` are an error.
pub fn make_train_val(
    d: &Dataset,
    ids: &[String],
    s: usize,
    ratio: f64,
    seed: u64,
) -> Result<Vec<TrainValSplit>, DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidParams(format!("ratio {ratio} not in (0, 1)")));
    }
    let index = d.id_index();
    let mut by_class: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
    for id in ids {
        let &i = index.get(id.as_str()).ok_or_else(|| DataError::UnknownId(id.clone()))?;
        by_class.entry(d.records[i].label.as_str()).or_default().push(id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(s);
    for _ in 0..s {
        let mut train_ids = Vec::new();
        let mut val_ids = Vec::new();
        for members in by_class.values() {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let n_train = round_half_up(ratio * members.len() as f64).min(members.len());
            train_ids.extend(shuffled[..n_train].iter().map(|s| (*s).clone()));
            val_ids.extend(shuffled[n_train..].iter().map(|s| (*s).clone()));
        }
        out.push(TrainValSplit { train_ids, val_ids });
    }
    Ok(out)
}

/// Per-class stratified train/val/test partition of the whole dataset.
///
/// Validation and test counts are `round_half_up(ratio * n)` (at least one
/// each); train receives the remainder.
pub fn make_stratified_split(d: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<SplitManifest, DataError> {
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
        return Err(DataError::InvalidParams("ratios must be positive".into()));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidParams("ratios must sum to 1".into()));
    }
    for (label, idx) in &d.class_index {
        if idx.len() < 3 {
            return Err(DataError::InsufficientSamples {
                label: label.clone(),
                available: idx.len(),
                required: 3,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = Fold::default();
    for idx in d.class_index.values() {
        let n = idx.len();
        let mut n_val = round_half_up(r_val * n as f64).max(1);
        let mut n_test = round_half_up(r_test * n as f64).max(1);
        // Leave at least one training flow.
        while n_val + n_test > n - 1 {
            if n_val >= n_test {
                n_val -= 1;
            } else {
                n_test -= 1;
            }
        }
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        let id = |i: &usize| d.records[*i].flow_id.clone();
        fold.val_ids.extend(shuffled[..n_val].iter().map(id));
        fold.test_ids.extend(shuffled[n_val..n_val + n_test].iter().map(id));
        fold.train_ids.extend(shuffled[n_val + n_test..].iter().map(id));
    }

    Ok(SplitManifest {
        scheme: SplitScheme::Stratified801010,
        seed,
        params: SplitParams {
            ratios: Some(vec![r_train, r_val, r_test]),
            ..Default::default()
        },
        folds: vec![fold],
    })
}

/// Wraps train/val splits of one population into a manifest.
pub fn train_val_manifest(splits: &[TrainValSplit], ratio: f64, seed: u64) -> SplitManifest {
    SplitManifest {
        scheme: SplitScheme::TrainVal,
        seed,
        params: SplitParams {
            s: Some(splits.len()),
            ratios: Some(vec![ratio, 1.0 - ratio]),
            ..Default::default()
        },
        folds: splits
            .iter()
            .map(|s| Fold {
                train_ids: s.train_ids.clone(),
                val_ids: s.val_ids.clone(),
                test_ids: Vec::new(),
            })
            .collect(),
    }
}

/// Class counts of an id list, keyed by label.
pub fn class_counts<'a>(d: &Dataset, ids: impl IntoIterator<Item = &'a String>) -> BTreeMap<String, usize> {
    let index = d.id_index();
    let mut out = BTreeMap::new();
    for id in ids {
        if let Some(&i) = index.get(id.as_str()) {
            *out.entry(d.records[i].label.clone()).or_insert(0) += 1;
        }
    }
    out
}

/// Set view of ids, used for disjointness checks.
pub fn id_set<'a>(ids: impl IntoIterator<Item = &'a String>) -> BTreeSet<&'a str> {
    ids.into_iter().map(|s| s.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(id: &str, label: &str, n: usize) -> FlowRecord {
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let sizes: Vec<u64> = (0..n).map(|i| 100 + i as u64).collect();
        FlowRecord {
            flow_id: id.into(),
            label: label.into(),
            partition: None,
            series: PacketSeries::from_raw(&ts, &sizes, None).unwrap().0,
        }
    }

    fn class_fixture(counts: &[(&str, usize)]) -> Dataset {
        let mut records = Vec::new();
        for (label, n) in counts {
            for i in 0..*n {
                records.push(flow(&format!("{label}-{i}"), label, 3));
            }
        }
        Dataset::from_records(records).unwrap()
    }

    #[test]
    fn rebases_and_clips() {
        let d = parse_dataset(r#"{"flow_id":"a","label":"x","timestamps":[3.0,3.5],"sizes":[100,2000]}"#).unwrap();
        let s = &d.records()[0].series;
        assert_eq!(s.timestamps(), &[0.0, 0.5]);
        assert_eq!(s.sizes(), &[100, 1500]);
        assert_eq!(d.clipped_sizes(), 1);
    }

    #[test]
    fn duplicate_id_reports_line() {
        let content = "{\"flow_id\":\"f1\",\"label\":\"x\",\"timestamps\":[0],\"sizes\":[1]}\n\
                       {\"flow_id\":\"f1\",\"label\":\"y\",\"timestamps\":[0],\"sizes\":[1]}\n";
        match parse_dataset(content) {
            Err(DataError::DuplicateId { line, flow_id }) => {
                assert_eq!(line, 2);
                assert_eq!(flow_id, "f1");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let content = "{\"flow_id\":\"a\",\"label\":\"x\",\"timestamps\":[0],\"sizes\":[1]}\nnot json\n";
        assert!(matches!(parse_dataset(content), Err(DataError::Parse { line: 2, .. })));
        let empty_series = r#"{"flow_id":"a","label":"x","timestamps":[],"sizes":[]}"#;
        assert!(matches!(
            parse_dataset(empty_series),
            Err(DataError::Parse { line: 1, .. })
        ));
        let zero = r#"{"flow_id":"a","label":"x","timestamps":[0],"sizes":[0]}"#;
        assert!(parse_dataset(zero).is_err());
        let decreasing = r#"{"flow_id":"a","label":"x","timestamps":[1,0],"sizes":[1,1]}"#;
        assert!(parse_dataset(decreasing).is_err());
        assert!(matches!(parse_dataset("\n\n"), Err(DataError::EmptyFile(_))));
    }

    #[test]
    fn min_packets_is_strict() {
        let d = Dataset::from_records(vec![
            flow("a", "x", 5),
            flow("b", "x", 10),
            flow("c", "y", 11),
            flow("d", "y", 200),
        ])
        .unwrap();
        let f = filter_min_packets(&d, 10);
        let ids: Vec<_> = f.records().iter().map(|r| r.flow_id.as_str()).collect();
        assert_eq!(ids, ["c", "d"]);
        assert_eq!(filter_min_packets(&f, 10), f);
    }

    #[test]
    fn min_class_size_boundaries() {
        let d = class_fixture(&[("A", 150), ("B", 40), ("C", 100), ("D", 99)]);
        let f = filter_min_class_size(&d, 100);
        assert_eq!(f.labels(), ["A", "C"]);
        assert_eq!(f.len(), 250);
        assert_eq!(filter_min_class_size(&f, 100), f);
    }

    #[test]
    fn fewshot_folds_from_smallest_class() {
        let d = class_fixture(&[("small", 592), ("big", 800)]);
        let m = make_fewshot_folds(&d, 5, 100, 7).unwrap();
        assert_eq!(m.folds.len(), 5);
        let mut used: HashSet<&str> = HashSet::new();
        for fold in &m.folds {
            let counts = class_counts(&d, &fold.train_ids);
            assert_eq!(counts["small"], 100);
            assert_eq!(counts["big"], 100);
            for id in &fold.train_ids {
                assert!(used.insert(id), "train ids overlap across folds");
            }
            assert!(fold.is_disjoint());
            assert_eq!(fold.train_ids.len() + fold.test_ids.len(), d.len());
        }
        let small_used = used.iter().filter(|id| id.starts_with("small-")).count();
        assert_eq!(592 - small_used, 92);
    }

    #[test]
    fn fewshot_exhaustive_and_insufficient() {
        let d = class_fixture(&[("a", 7)]);
        let m = make_fewshot_folds(&d, 1, 7, 1).unwrap();
        assert_eq!(m.folds[0].train_ids.len(), 7);
        assert!(m.folds[0].test_ids.is_empty());
        match make_fewshot_folds(&d, 2, 4, 1) {
            Err(DataError::InsufficientSamples { label, .. }) => assert_eq!(label, "a"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fewshot_is_deterministic() {
        let d = class_fixture(&[("a", 40), ("b", 30)]);
        assert_eq!(
            make_fewshot_folds(&d, 3, 10, 99).unwrap(),
            make_fewshot_folds(&d, 3, 10, 99).unwrap()
        );
        assert_ne!(
            make_fewshot_folds(&d, 3, 10, 99).unwrap(),
            make_fewshot_folds(&d, 3, 10, 100).unwrap()
        );
    }

    #[test]
    fn train_val_rounding() {
        let d = class_fixture(&[("a", 100), ("b", 5)]);
        let a_ids: Vec<String> = (0..100).map(|i| format!("a-{i}")).collect();
        let splits = make_train_val(&d, &a_ids, 3, 0.8, 4).unwrap();
        assert_eq!(splits.len(), 3);
        for s in &splits {
            assert_eq!(s.train_ids.len(), 80);
            assert_eq!(s.val_ids.len(), 20);
        }
        assert_ne!(splits[0], splits[1]);
        assert_eq!(splits, make_train_val(&d, &a_ids, 3, 0.8, 4).unwrap());

        let b_ids: Vec<String> = (0..5).map(|i| format!("b-{i}")).collect();
        let s = &make_train_val(&d, &b_ids, 1, 0.8, 0).unwrap()[0];
        assert_eq!((s.train_ids.len(), s.val_ids.len()), (4, 1));
        assert!(make_train_val(&d, &b_ids, 1, 1.0, 0).is_err());
    }

    #[test]
    fn stratified_counts() {
        let d = class_fixture(&[("A", 1000), ("B", 97)]);
        let m = make_stratified_split(&d, (0.8, 0.1, 0.1), 3).unwrap();
        let f = &m.folds[0];
        let tr = class_counts(&d, &f.train_ids);
        let va = class_counts(&d, &f.val_ids);
        let te = class_counts(&d, &f.test_ids);
        assert_eq!((tr["A"], va["A"], te["A"]), (800, 100, 100));
        assert_eq!((tr["B"], va["B"], te["B"]), (77, 10, 10));
        assert!(f.is_disjoint());
        m.validate(&d).unwrap();
    }

    #[test]
    fn stratified_rejects_tiny_classes() {
        let d = class_fixture(&[("A", 10), ("tiny", 2)]);
        match make_stratified_split(&d, (0.8, 0.1, 0.1), 3) {
            Err(DataError::InsufficientSamples { label, .. }) => assert_eq!(label, "tiny"),
            other => panic!("{other:?}"),
        }
        let d = class_fixture(&[("A", 3)]);
        let m = make_stratified_split(&d, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(m.folds[0].train_ids.len(), 1);
        assert_eq!(m.folds[0].val_ids.len(), 1);
        assert_eq!(m.folds[0].test_ids.len(), 1);
    }

    #[test]
    fn manifest_schema_checks() {
        let bad = r#"{"scheme":"kfold","seed":1,"params":{},"folds":[]}"#;
        assert!(matches!(SplitManifest::from_json(bad), Err(DataError::Schema(_))));

        let d = class_fixture(&[("A", 3)]);
        let m = SplitManifest {
            scheme: SplitScheme::TrainVal,
            seed: 0,
            params: SplitParams::default(),
            folds: vec![Fold {
                train_ids: vec!["A-0".into(), "ghost".into()],
                ..Default::default()
            }],
        };
        let reloaded = SplitManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(reloaded, m);
        assert!(matches!(reloaded.validate(&d), Err(DataError::UnknownId(id)) if id == "ghost"));
    }
}
