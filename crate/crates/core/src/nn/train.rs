//! Supervised training, SimCLR pre-training, few-shot fine-tuning and
//! evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMetadata, EpochRecord};
use super::loss::{argmax, cross_entropy, info_nce};
use super::network::{NetMode, Network, NetworkConfig, BACKBONE_LAYERS};
use super::optim::{Optimizer, OptimizerKind};
use super::tensor::Tensor;
use super::NnError;
use crate::augment::{make_views, AugmentationSpec};
use crate::dataio::PacketSeries;
use crate::flowpic::{FlowpicConfig, Image};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without improvement tolerated before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    /// InfoNCE temperature (contrastive pre-training only).
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// `k` of the top-k agreement monitored during pre-training.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_temperature() -> f64 {
    0.07
}

fn default_top_k() -> usize {
    5
}

pub const MAX_EPOCHS: usize = 500;

impl TrainConfig {
    /// lr 0.001, batch 32, early stop on validation loss (patience 5, min delta 0.001).
    pub fn supervised() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            patience: 5,
            min_delta: 0.001,
            max_epochs: MAX_EPOCHS,
            temperature: default_temperature(),
            top_k: default_top_k(),
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }

    /// lr 0.001, batch 32 samples (64 views), temperature 0.07, early stop on
    /// top-5 agreement with patience 3.
    pub fn simclr() -> Self {
        Self {
            patience: 3,
            min_delta: 0.0,
            ..Self::supervised()
        }
    }

    /// lr 0.01, early stop on training loss (patience 5, min delta 0.001).
    pub fn finetune() -> Self {
        Self {
            learning_rate: 0.01,
            ..Self::supervised()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be nonnegative");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k must be positive");
        }
        Ok(())
    }
}

/// Patience-based early stopping on a monitored scalar.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    maximize: bool,
    best: Option<f64>,
    wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopState {
    Improved,
    Waiting,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64, maximize: bool) -> Self {
        Self {
            patience,
            min_delta,
            maximize,
            best: None,
            wait: 0,
        }
    }

    /// The first observation always counts as an improvement; afterwards a
    /// value must beat the best one by more than `min_delta`.
    pub fn update(&mut self, value: f64) -> StopState {
        let improved = match self.best {
            None => true,
            Some(b) if self.maximize => value > b + self.min_delta,
            Some(b) => value < b - self.min_delta,
        };
        if improved {
            self.best = Some(value);
            self.wait = 0;
            StopState::Improved
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                StopState::Stop
            } else {
                StopState::Waiting
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Vec<Image>, labels: Vec<usize>) -> Result<Self, NnError> {
        if images.len() != labels.len() {
            return Err(NnError::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best epoch.
    pub network: Network<f32>,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch the returned parameters come from.
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    /// One row of network outputs per sample.
    pub logits: Vec<Vec<f32>>,
}

fn check_labels(net: &Network<f32>, data: &LabeledImages, what: &str) -> Result<(), NnError> {
    if data.is_empty() {
        return Err(NnError::Config(format!("{what} set is empty")));
    }
    let c = net.config().num_classes;
    if let Some(&l) = data.labels.iter().find(|&&l| l >= c) {
        return Err(NnError::Config(format!(
            "{what} label {l} out of range for {c} classes"
        )));
    }
    if data.labels.len() != data.images.len() {
        return Err(NnError::Shape(format!("{what} images and labels differ in length")));
    }
    Ok(())
}

fn finite(loss: f64, epoch: usize) -> Result<f64, NnError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(NnError::Divergence { epoch })
    }
}

fn outcome(best: Network<f32>, seed: u64, best_epoch: usize, history: Vec<EpochRecord>) -> TrainOutcome {
    let metadata = CheckpointMetadata {
        seed,
        epoch: best_epoch,
        history: history.clone(),
    };
    TrainOutcome {
        checkpoint: Checkpoint::from_network(&best, metadata),
        network: best,
        epochs_run: history.len(),
        history,
        best_epoch,
    }
}

/// Mean cross-entropy of `net` over a labeled set in evaluation mode.
fn mean_loss(net: &Network<f32>, data: &LabeledImages) -> Result<f64, NnError> {
    let mut total = 0.0;
    for (imgs, labels) in data.images.chunks(EVAL_BATCH).zip(data.labels.chunks(EVAL_BATCH)) {
        let refs: Vec<&Image> = imgs.iter().collect();
        let logits = net.forward(net.batch(&refs)?)?;
        let (loss, _) = cross_entropy(&logits, labels)?;
        total += loss as f64 * labels.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains a supervised network with cross-entropy, stopping early on the
/// validation loss. The returned network holds the best-validation parameters.
pub fn train_supervised(
    net: Network<f32>,
    train: &LabeledImages,
    val: &LabeledImages,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, NnError> {
    cfg.validate()?;
    if net.config().mode != NetMode::Supervised {
        return Err(NnError::Config("train_supervised needs a supervised network".into()));
    }
    check_labels(&net, train, "training")?;
    check_labels(&net, val, "validation")?;

    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta, false);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (net.clone(), 1);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Image> = idx.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (logits, tape) = net.forward_train(net.batch(&imgs)?, &mut rng)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            finite(loss as f64, epoch)?;
            sum += loss as f64 * idx.len() as f64;
            let (grads, _) = net.backward(&tape, grad)?;
            opt.step(&mut net, &grads)?;
        }
        let train_loss = finite(sum / train.len() as f64, epoch)?;
        let val_loss = finite(mean_loss(&net, val)?, epoch)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: Some(val_loss),
            metric: None,
        });
        log::debug!("supervised epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        match stopper.update(val_loss) {
            StopState::Improved => best = (net.clone(), epoch),
            StopState::Waiting => {}
            StopState::Stop => break,
        }
    }
    Ok(outcome(best.0, cfg.seed, best.1, history))
}

/// Builds the `2B` views for a batch of `B` samples, laid out so that rows
/// `2i` and `2i + 1` are the two views of sample `i`.
pub fn simclr_batch_views(
    samples: &[&PacketSeries],
    pair: (AugmentationSpec, AugmentationSpec),
    flowpic: &FlowpicConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Image>, NnError> {
    let mut views = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let (a, b) = make_views(s, pair, flowpic, rng)?;
        views.push(a);
        views.push(b);
    }
    Ok(views)
}

/// Contrastive pre-training with InfoNCE on freshly augmented view pairs.
///
/// Early stopping maximizes the epoch's mean top-k agreement. Batches with a
/// single sample are skipped since they hold no negatives.
pub fn pretrain_simclr(
    net: Network<f32>,
    samples: &[PacketSeries],
    pair: (AugmentationSpec, AugmentationSpec),
    flowpic: &FlowpicConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, NnError> {
    cfg.validate()?;
    if net.config().mode != NetMode::SimclrPretrain {
        return Err(NnError::Config(
            "pretrain_simclr needs a simclr_pretrain network".into(),
        ));
    }
    if flowpic.resolution != net.config().flowpic_dim {
        return Err(NnError::Shape(format!(
            "flowpic resolution {} does not match network input {}",
            flowpic.resolution,
            net.config().flowpic_dim
        )));
    }
    if samples.len() < 2 {
        return Err(NnError::Config("pre-training needs at least 2 samples".into()));
    }

    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta, true);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();
    let mut best = (net.clone(), 1);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut top_sum, mut seen) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let batch: Vec<&PacketSeries> = idx.iter().map(|&i| &samples[i]).collect();
            let views = simclr_batch_views(&batch, pair, flowpic, &mut aug_rng)?;
            let refs: Vec<&Image> = views.iter().collect();
            let (z, tape) = net.forward_train(net.batch(&refs)?, &mut rng)?;
            let out = info_nce(&z, cfg.temperature, cfg.top_k)?;
            finite(out.loss as f64, epoch)?;
            loss_sum += out.loss as f64 * idx.len() as f64;
            top_sum += out.top_k * idx.len() as f64;
            seen += idx.len();
            let (grads, _) = net.backward(&tape, out.grad)?;
            opt.step(&mut net, &grads)?;
        }
        let train_loss = finite(loss_sum / seen as f64, epoch)?;
        let top = top_sum / seen as f64;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: None,
            metric: Some(top),
        });
        log::debug!("simclr epoch {epoch}: loss {train_loss:.5} top-{} {top:.4}", cfg.top_k);
        match stopper.update(top) {
            StopState::Improved => best = (net.clone(), epoch),
            StopState::Waiting => {}
            StopState::Stop => break,
        }
    }
    Ok(outcome(best.0, cfg.seed, best.1, history))
}

/// Fine-tunes a linear classifier on top of a frozen pre-trained backbone.
///
/// The backbone runs in evaluation mode, so its features are computed once.
/// Early stopping monitors the training loss.
pub fn finetune(
    pretrained: &Network<f32>,
    num_classes: usize,
    train: &LabeledImages,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, NnError> {
    cfg.validate()?;
    let pc = pretrained.config();
    if pc.mode != NetMode::SimclrPretrain {
        return Err(NnError::ConfigMismatch(format!(
            "expected a simclr_pretrain network, got {:?}",
            pc.mode
        )));
    }
    let proj = pc
        .projection_dim
        .ok_or_else(|| NnError::ConfigMismatch("pre-trained network has no projection_dim".into()))?;
    let config = NetworkConfig::finetune(pc.flowpic_dim, num_classes, proj);
    let mut net = Network::<f32>::new(config, cfg.seed)?;
    net.copy_layers_from(pretrained, &Network::<f32>::backbone_param_layers())?;
    net.freeze_prefix(BACKBONE_LAYERS);
    check_labels(&net, train, "training")?;

    let mut features = Vec::with_capacity(train.len());
    for imgs in train.images.chunks(EVAL_BATCH) {
        let refs: Vec<&Image> = imgs.iter().collect();
        let (f, _) = net.forward_range(net.batch(&refs)?, 0..BACKBONE_LAYERS, None)?;
        features.extend(f.data().chunks(f.shape()[1]).map(<[f32]>::to_vec));
    }
    let width = features[0].len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta, false);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (net.clone(), 1);
    let all = 0..net.num_layers();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let data: Vec<f32> = idx.iter().flat_map(|&i| features[i].iter().copied()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let x = Tensor::new(vec![idx.len(), width], data)?;
            let (logits, tape) = net.forward_range(x, BACKBONE_LAYERS..all.end, Some(&mut rng))?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            finite(loss as f64, epoch)?;
            sum += loss as f64 * idx.len() as f64;
            let (grads, _) = net.backward(&tape.expect("training tape"), grad)?;
            opt.step(&mut net, &grads)?;
        }
        let train_loss = finite(sum / train.len() as f64, epoch)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: None,
            metric: None,
        });
        match stopper.update(train_loss) {
            StopState::Improved => best = (net.clone(), epoch),
            StopState::Waiting => {}
            StopState::Stop => break,
        }
    }
    Ok(outcome(best.0, cfg.seed, best.1, history))
}

/// Evaluation-mode predictions; ties resolve to the lowest class index.
pub fn evaluate(net: &Network<f32>, images: &[Image]) -> Result<Evaluation, NnError> {
    let mut predictions = Vec::with_capacity(images.len());
    let mut logits = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let y = net.forward(net.batch(&refs)?)?;
        for row in y.data().chunks(y.shape()[1]) {
            predictions.push(argmax(row));
            logits.push(row.to_vec());
        }
    }
    Ok(Evaluation { predictions, logits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_counts_patience_after_last_improvement() {
        let mut es = EarlyStopping::new(5, 0.001, false);
        assert_eq!(es.update(1.0), StopState::Improved);
        assert_eq!(es.update(0.5), StopState::Improved);
        let mut extra = 0;
        loop {
            extra += 1;
            if es.update(0.4995) == StopState::Stop {
                break;
            }
        }
        assert_eq!(extra, 5);
        assert_eq!(es.best(), Some(0.5));
    }

    #[test]
    fn maximizing_requires_strict_gain() {
        let mut es = EarlyStopping::new(3, 0.0, true);
        es.update(0.5);
        assert_eq!(es.update(0.5), StopState::Waiting);
        assert_eq!(es.update(0.6), StopState::Improved);
    }

    #[test]
    fn defaults_validate() {
        for c in [
            TrainConfig::supervised(),
            TrainConfig::simclr(),
            TrainConfig::finetune(),
        ] {
            c.validate().unwrap();
        }
        let mut c = TrainConfig::supervised();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::finetune().learning_rate, 0.01);
        assert_eq!(TrainConfig::simclr().patience, 3);
    }
}
