//! Multiclass gradient-boosted trees with second-order (Newton) leaf values
//! and exact greedy split search.

use serde::{Deserialize, Serialize};

use crate::dataio::FlowRecord;
use crate::flowpic::{build_flowpic, DEFAULT_WINDOW};

#[derive(Debug, thiserror::Error)]
pub enum BoostError {
    #[error("invalid parameters: {0}")]
    Config(String),
    #[error("degenerate training data: {0}")]
    Degenerate(String),
    #[error("feature length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("model serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Feature layout fed to the boosted trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    /// Row-major flattened raw-count flowpic over the default 15 s window.
    FlattenedFlowpic { resolution: usize },
    /// First `packets` sizes, directions and inter-arrival times, concatenated
    /// and zero-padded.
    EarlyTimeseries { packets: usize },
}

impl Default for FeatureSource {
    fn default() -> Self {
        Self::FlattenedFlowpic { resolution: 32 }
    }
}

impl FeatureSource {
    pub fn len(&self) -> usize {
        match *self {
            Self::FlattenedFlowpic { resolution } => resolution * resolution,
            Self::EarlyTimeseries { packets } => 3 * packets,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), BoostError> {
        match *self {
            Self::FlattenedFlowpic { resolution } if resolution < 2 => {
                Err(BoostError::Config("flowpic resolution must be >= 2".into()))
            }
            Self::EarlyTimeseries { packets: 0 } => {
                Err(BoostError::Config("early time series needs >= 1 packet".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Maps a flow to its feature vector. Missing directions read as 0; the
/// first inter-arrival time is 0.
pub fn extract_features(flow: &FlowRecord, source: &FeatureSource) -> Vec<f64> {
    let s = &flow.series;
    match *source {
        FeatureSource::FlattenedFlowpic { resolution } => build_flowpic(s, resolution, DEFAULT_WINDOW)
            .counts()
            .iter()
            .map(|&c| c as f64)
            .collect(),
        FeatureSource::EarlyTimeseries { packets } => {
            let n = s.len().min(packets);
            let mut out = vec![0.0; 3 * packets];
            let ts = s.timestamps();
            for i in 0..n {
                out[i] = s.sizes()[i] as f64;
                out[packets + i] = s.directions().map_or(0.0, |d| d[i] as f64);
                out[2 * packets + i] = if i == 0 { 0.0 } else { ts[i] - ts[i - 1] };
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostParams {
    #[serde(default = "default_rounds")]
    pub n_rounds: usize,
    #[serde(default = "default_depth")]
    pub max_depth: usize,
    #[serde(default = "default_eta")]
    pub learning_rate: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_min_child_weight")]
    pub min_child_weight: f64,
}

fn default_rounds() -> usize {
    100
}
fn default_depth() -> usize {
    6
}
fn default_eta() -> f64 {
    0.3
}
fn default_lambda() -> f64 {
    1.0
}
fn default_min_child_weight() -> f64 {
    1.0
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            n_rounds: default_rounds(),
            max_depth: default_depth(),
            learning_rate: default_eta(),
            lambda: default_lambda(),
            min_child_weight: default_min_child_weight(),
        }
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<(), BoostError> {
        if self.max_depth == 0 {
            return Err(BoostError::Config("max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(BoostError::Config("learning_rate must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(BoostError::Config(
                "lambda and min_child_weight must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Samples with `x[feature] < threshold` go to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

/// Regression tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { weight } => weight,
            Node::Split { .. } => unreachable!("leaf_index stops at leaves"),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(self, 0)
    }

    /// Split features in node order.
    pub fn split_features(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect()
    }

    /// Leaf reached by each sample; identifies the induced partition.
    pub fn partition(&self, x: &[Vec<f64>]) -> Vec<usize> {
        x.iter().map(|r| self.leaf_index(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub num_classes: usize,
    pub num_features: usize,
    pub params: BoostParams,
    /// `trees[round][class]`.
    pub trees: Vec<Vec<Tree>>,
    /// Training log-loss after each round.
    pub train_log_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

fn log_loss(margins: &[Vec<f64>], y: &[usize]) -> f64 {
    let mut total = 0.0;
    for (m, &label) in margins.iter().zip(y) {
        let mx = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + m.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - m[label];
    }
    total / y.len() as f64
}

struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Grows one tree level by level. `order[f]` lists sample indices sorted by
/// feature `f`; `active` marks the features worth scanning.
fn grow_tree(x: &[Vec<f64>], g: &[f64], h: &[f64], order: &[Vec<usize>], active: &[usize], p: &BoostParams) -> Tree {
    let n = x.len();
    let score = |gs: f64, hs: f64| gs * gs / (hs + p.lambda);
    let mut nodes = vec![Node::Leaf { weight: 0.0 }];
    // Node each sample currently sits in, among the open nodes of this level.
    let mut slot: Vec<Option<usize>> = vec![Some(0); n];
    let mut open: Vec<usize> = vec![0];
    let mut sums = vec![(g.iter().sum::<f64>(), h.iter().sum::<f64>())];

    for depth in 0..=p.max_depth {
        let k = open.len();
        let mut best: Vec<Option<SplitCandidate>> = (0..k).map(|_| None).collect();
        if depth < p.max_depth {
            let mut gl = vec![0.0; k];
            let mut hl = vec![0.0; k];
            let mut last: Vec<Option<f64>> = vec![None; k];
            for &f in active {
                gl.iter_mut().for_each(|v| *v = 0.0);
                hl.iter_mut().for_each(|v| *v = 0.0);
                last.iter_mut().for_each(|v| *v = None);
                for &i in &order[f] {
                    let Some(s) = slot[i] else { continue };
                    let v = x[i][f];
                    if let Some(prev) = last[s] {
                        if v > prev {
                            let (gt, ht) = sums[s];
                            let (gr, hr) = (gt - gl[s], ht - hl[s]);
                            if hl[s] >= p.min_child_weight && hr >= p.min_child_weight {
                                let gain = score(gl[s], hl[s]) + score(gr, hr) - score(gt, ht);
                                if gain > 1e-12 && best[s].as_ref().is_none_or(|b| gain > b.gain) {
                                    let mut threshold = prev + (v - prev) / 2.0;
                                    if threshold <= prev {
                                        threshold = v;
                                    }
                                    best[s] = Some(SplitCandidate {
                                        gain,
                                        feature: f,
                                        threshold,
                                    });
                                }
                            }
                        }
                    }
                    last[s] = Some(v);
                    gl[s] += g[i];
                    hl[s] += h[i];
                }
            }
        }

        let mut next_open = Vec::new();
        let mut next_sums = Vec::new();
        // Open-slot index -> (left slot, right slot) in the next level.
        let mut remap: Vec<Option<(usize, usize)>> = vec![None; k];
        for (s, cand) in best.into_iter().enumerate() {
            let node = open[s];
            match cand {
                Some(c) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf { weight: 0.0 });
                    nodes.push(Node::Leaf { weight: 0.0 });
                    nodes[node] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right: left + 1,
                    };
                    remap[s] = Some((next_open.len(), next_open.len() + 1));
                    next_open.extend([left, left + 1]);
                    next_sums.extend([(0.0, 0.0), (0.0, 0.0)]);
                }
                None => {
                    let (gs, hs) = sums[s];
                    nodes[node] = Node::Leaf {
                        weight: -gs / (hs + p.lambda),
                    };
                }
            }
        }
        if next_open.is_empty() {
            break;
        }
        for i in 0..n {
            let Some(s) = slot[i] else { continue };
            slot[i] = remap[s].map(|(l, r)| {
                let Node::Split { feature, threshold, .. } = nodes[open[s]] else {
                    unreachable!("remapped nodes are splits")
                };
                let t = if x[i][feature] < threshold { l } else { r };
                next_sums[t].0 += g[i];
                next_sums[t].1 += h[i];
                t
            });
        }
        open = next_open;
        sums = next_sums;
    }
    Tree { nodes }
}

/// Fits `n_rounds` rounds of one tree per class on softmax gradients and
/// hessians `2p(1 - p)`.
pub fn fit(x: &[Vec<f64>], y: &[usize], params: &BoostParams) -> Result<BoostModel, BoostError> {
    params.validate()?;
    if x.is_empty() || x.len() != y.len() {
        return Err(BoostError::Degenerate(format!(
            "{} feature rows for {} labels",
            x.len(),
            y.len()
        )));
    }
    let nf = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != nf) {
        return Err(BoostError::LengthMismatch {
            expected: nf,
            got: r.len(),
        });
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(BoostError::Degenerate("non-finite feature value".into()));
    }
    let num_classes = y.iter().max().map_or(0, |&m| m + 1);
    let mut present = vec![false; num_classes];
    y.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&b| b).count() < 2 {
        return Err(BoostError::Degenerate("at least 2 classes are required".into()));
    }

    let n = x.len();
    let mut order = Vec::with_capacity(nf);
    let mut active = Vec::new();
    for f in 0..nf {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        if x[idx[0]][f] < x[idx[n - 1]][f] {
            active.push(f);
        }
        order.push(idx);
    }

    let mut margins = vec![vec![0.0; num_classes]; n];
    let mut trees = Vec::with_capacity(params.n_rounds);
    let mut history = Vec::with_capacity(params.n_rounds);
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for _ in 0..params.n_rounds {
        let probs: Vec<Vec<f64>> = margins
            .iter()
            .map(|m| {
                let mut p = m.clone();
                softmax_in_place(&mut p);
                p
            })
            .collect();
        let mut round = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            for i in 0..n {
                let pc = probs[i][c];
                g[i] = pc - if y[i] == c { 1.0 } else { 0.0 };
                h[i] = (2.0 * pc * (1.0 - pc)).max(1e-16);
            }
            let mut tree = grow_tree(x, &g, &h, &order, &active, params);
            for node in &mut tree.nodes {
                if let Node::Leaf { weight } = node {
                    *weight *= params.learning_rate;
                }
            }
            round.push(tree);
        }
        for (i, m) in margins.iter_mut().enumerate() {
            for (c, t) in round.iter().enumerate() {
                m[c] += t.predict(&x[i]);
            }
        }
        history.push(log_loss(&margins, y));
        trees.push(round);
    }
    Ok(BoostModel {
        num_classes,
        num_features: nf,
        params: *params,
        trees,
        train_log_loss: history,
    })
}

impl BoostModel {
    pub fn margins(&self, x: &[f64]) -> Result<Vec<f64>, BoostError> {
        if x.len() != self.num_features {
            return Err(BoostError::LengthMismatch {
                expected: self.num_features,
                got: x.len(),
            });
        }
        let mut m = vec![0.0; self.num_classes];
        for round in &self.trees {
            for (c, t) in round.iter().enumerate() {
                m[c] += t.predict(x);
            }
        }
        Ok(m)
    }

    /// Softmax over summed leaf scores; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction, BoostError> {
        let mut p = self.margins(x)?;
        softmax_in_place(&mut p);
        let mut label = 0;
        for (c, &v) in p.iter().enumerate() {
            if v > p[label] {
                label = c;
            }
        }
        Ok(Prediction {
            label,
            probabilities: p,
        })
    }

    pub fn predict_labels(&self, x: &[Vec<f64>]) -> Result<Vec<usize>, BoostError> {
        x.iter().map(|r| self.predict(r).map(|p| p.label)).collect()
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().flatten().map(Tree::depth).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, BoostError> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::PacketSeries;

    fn flow(ts: &[f64], sizes: &[u32], dirs: Option<Vec<i8>>) -> FlowRecord {
        FlowRecord {
            flow_id: "f".into(),
            label: "a".into(),
            partition: None,
            series: PacketSeries::from_parts(ts.to_vec(), sizes.to_vec(), dirs).unwrap(),
        }
    }

    #[test]
    fn early_timeseries_layout() {
        let f = flow(&[0.0, 0.5, 0.75, 2.0], &[100, 200, 300, 40], Some(vec![1, -1, -1, 1]));
        let v = extract_features(&f, &FeatureSource::EarlyTimeseries { packets: 10 });
        assert_eq!(v.len(), 30);
        let mut expect = vec![0.0; 30];
        expect[..4].copy_from_slice(&[100.0, 200.0, 300.0, 40.0]);
        expect[10..14].copy_from_slice(&[1.0, -1.0, -1.0, 1.0]);
        expect[20..24].copy_from_slice(&[0.0, 0.5, 0.25, 1.25]);
        assert_eq!(v, expect);
    }

    #[test]
    fn empty_flow_flowpic_features_are_zero() {
        let f = flow(&[], &[], None);
        let v = extract_features(&f, &FeatureSource::default());
        assert_eq!(v, vec![0.0; 1024]);
    }

    #[test]
    fn separable_one_feature() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let p = BoostParams {
            n_rounds: 1,
            ..Default::default()
        };
        let m = fit(&x, &y, &p).unwrap();
        assert_eq!(m.predict_labels(&x).unwrap(), y);
        match m.trees[0][0].nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 9.5);
            }
            _ => panic!("root should split"),
        }
    }

    #[test]
    fn zero_rounds_is_uniform() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let m = fit(
            &x,
            &[0, 1, 2],
            &BoostParams {
                n_rounds: 0,
                ..Default::default()
            },
        )
        .unwrap();
        let p = m.predict(&[5.0]).unwrap();
        assert!(p.probabilities.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(p.label, 0);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            fit(&x, &[1, 1], &Default::default()),
            Err(BoostError::Degenerate(_))
        ));
        let bad = BoostParams {
            max_depth: 0,
            ..Default::default()
        };
        assert!(matches!(fit(&x, &[0, 1], &bad), Err(BoostError::Config(_))));
        let m = fit(&x, &[0, 1], &Default::default()).unwrap();
        assert!(matches!(m.predict(&[0.0, 1.0]), Err(BoostError::LengthMismatch { .. })));
    }

    #[test]
    fn json_round_trip() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64, (i / 3) as f64 * 0.1]).collect();
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let m = fit(
            &x,
            &y,
            &BoostParams {
                n_rounds: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(BoostModel::from_json(&m.to_json()).unwrap(), m);
        assert!(m.max_depth() <= 6);
    }
}
