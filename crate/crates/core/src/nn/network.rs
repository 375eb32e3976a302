//! Fixed LeNet-style topologies for supervised, contrastive pre-training and
//! fine-tuning use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Conv2d, Layer, Linear};
use super::tensor::{Scalar, Tensor};
use super::NnError;
use crate::flowpic::Image;

pub const CHANNEL_DROPOUT: f64 = 0.25;
pub const ELEMENT_DROPOUT: f64 = 0.5;
/// Width of the representation produced by the backbone.
pub const REPRESENTATION_DIM: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetMode {
    Supervised,
    SimclrPretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub flowpic_dim: usize,
    pub num_classes: usize,
    pub with_dropout: bool,
    pub mode: NetMode,
    #[serde(default)]
    pub projection_dim: Option<usize>,
}

impl NetworkConfig {
    pub fn supervised(flowpic_dim: usize, num_classes: usize, with_dropout: bool) -> Self {
        Self {
            flowpic_dim,
            num_classes,
            with_dropout,
            mode: NetMode::Supervised,
            projection_dim: None,
        }
    }

    pub fn simclr(flowpic_dim: usize, num_classes: usize, with_dropout: bool, projection_dim: usize) -> Self {
        Self {
            flowpic_dim,
            num_classes,
            with_dropout,
            mode: NetMode::SimclrPretrain,
            projection_dim: Some(projection_dim),
        }
    }

    pub fn finetune(flowpic_dim: usize, num_classes: usize, projection_dim: usize) -> Self {
        Self {
            flowpic_dim,
            num_classes,
            with_dropout: false,
            mode: NetMode::Finetune,
            projection_dim: Some(projection_dim),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if !matches!(self.flowpic_dim, 32 | 64 | 1500) {
            return Err(NnError::Config(format!(
                "unsupported flowpic_dim {} (expected 32, 64 or 1500)",
                self.flowpic_dim
            )));
        }
        if self.num_classes < 1 {
            return Err(NnError::Config("num_classes must be >= 1".into()));
        }
        match (self.mode, self.projection_dim) {
            (NetMode::Supervised, Some(_)) => Err(NnError::Config(
                "projection_dim only applies to contrastive modes".into(),
            )),
            (NetMode::SimclrPretrain | NetMode::Finetune, None) => {
                Err(NnError::Config("projection_dim is required".into()))
            }
            (_, Some(0)) => Err(NnError::Config("projection_dim must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Flattened size after the convolutional blocks.
    pub fn flatten_dim(&self) -> usize {
        let (c1, c2) = self.conv_shapes();
        let h = c1.output_size(self.flowpic_dim) / 2;
        let h = c2.output_size(h) / 2;
        c2.out_channels * h * h
    }

    fn conv_shapes(&self) -> (Conv2d<f32>, Conv2d<f32>) {
        if self.flowpic_dim == 1500 {
            (Conv2d::new(1, 6, 10, 5), Conv2d::new(6, 16, 10, 5))
        } else {
            (Conv2d::new(1, 6, 5, 1), Conv2d::new(6, 16, 5, 1))
        }
    }
}

/// Number of leading layers shared by every mode (convolutions through the
/// 120-wide representation).
pub const BACKBONE_LAYERS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    layers: Vec<(String, Layer<T>)>,
    frozen: usize,
}

/// Forward-pass record needed to backpropagate through layers `start..`.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    start: usize,
    caches: Vec<Cache<T>>,
}

/// Gradients for every parameter tensor, in [`Network::param_names`] order.
/// Entries for frozen layers are `None`.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

/// Kaiming-uniform bound for ReLU networks: `sqrt(6 / fan_in)`.
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl<T: Scalar> Network<T> {
    /// Builds the topology for `config` with all parameters set to zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self, NnError> {
        config.validate()?;
        let (c1, c2) = config.conv_shapes();
        let c1 = Conv2d::<T>::new(c1.in_channels, c1.out_channels, c1.kernel, c1.stride);
        let c2 = Conv2d::<T>::new(c2.in_channels, c2.out_channels, c2.kernel, c2.stride);
        let drop2d = if config.with_dropout { CHANNEL_DROPOUT } else { 0.0 };
        let drop = if config.with_dropout { ELEMENT_DROPOUT } else { 0.0 };
        let rep = REPRESENTATION_DIM;
        let mut layers: Vec<(String, Layer<T>)> = vec![
            ("conv1".into(), Layer::Conv2d(c1)),
            ("relu1".into(), Layer::Relu),
            ("pool1".into(), Layer::MaxPool2),
            ("conv2".into(), Layer::Conv2d(c2)),
            ("relu2".into(), Layer::Relu),
            ("dropout2d".into(), Layer::Dropout2d(drop2d)),
            ("pool2".into(), Layer::MaxPool2),
            ("flatten".into(), Layer::Flatten),
            ("fc1".into(), Layer::Linear(Linear::new(config.flatten_dim(), rep))),
            ("relu3".into(), Layer::Relu),
        ];
        debug_assert_eq!(layers.len(), BACKBONE_LAYERS);
        let head: Vec<(String, Layer<T>)> = match config.mode {
            NetMode::Supervised if config.flowpic_dim == 1500 => vec![
                ("dropout".into(), Layer::Dropout(drop)),
                ("fc3".into(), Layer::Linear(Linear::new(rep, config.num_classes))),
            ],
            NetMode::Supervised => vec![
                ("fc2".into(), Layer::Linear(Linear::new(rep, 84))),
                ("relu4".into(), Layer::Relu),
                ("dropout".into(), Layer::Dropout(drop)),
                ("fc3".into(), Layer::Linear(Linear::new(84, config.num_classes))),
            ],
            NetMode::SimclrPretrain => vec![
                ("proj1".into(), Layer::Linear(Linear::new(rep, rep))),
                ("relu4".into(), Layer::Relu),
                ("dropout".into(), Layer::Dropout(drop)),
                (
                    "proj2".into(),
                    Layer::Linear(Linear::new(rep, config.projection_dim.expect("validated"))),
                ),
            ],
            NetMode::Finetune => vec![("classifier".into(), Layer::Linear(Linear::new(rep, config.num_classes)))],
        };
        layers.extend(head);
        Ok(Self {
            config,
            layers,
            frozen: 0,
        })
    }

    /// Builds the network with Kaiming-uniform weights and zero biases.
    ///
    /// Weights are drawn as `f32` so that `Network::<f64>` instances hold the
    /// same values as their `f32` counterparts.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NnError> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, layer) in &mut net.layers {
            let fan_in = match layer {
                Layer::Conv2d(c) => c.in_channels * c.kernel * c.kernel,
                Layer::Linear(l) => l.in_features,
                _ => continue,
            };
            let bound = kaiming_bound(fan_in) as f32;
            if let Some((w, _)) = layer.params_mut() {
                for v in w.data_mut() {
                    *v = T::of(rng.gen_range(-bound..bound) as f64);
                }
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[(String, Layer<T>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(String, Layer<T>)] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Freezes the first `n` layers: backward passes stop before them and
    /// optimizers leave their parameters untouched.
    pub fn freeze_prefix(&mut self, n: usize) {
        self.frozen = n.min(self.layers.len());
    }

    pub fn frozen_layers(&self) -> usize {
        self.frozen
    }

    /// `layer.weight` / `layer.bias` names, in layer order.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|(_, l)| l.params().is_some())
            .flat_map(|(n, _)| [format!("{n}.weight"), format!("{n}.bias")])
            .collect()
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (n, l) in &self.layers {
            if let Some((w, b)) = l.params() {
                out.push((format!("{n}.weight"), w));
                out.push((format!("{n}.bias"), b));
            }
        }
        out
    }

    /// Mutable parameters with a flag telling whether each one is trainable.
    pub fn params_mut(&mut self) -> Vec<(&mut Tensor<T>, bool)> {
        let frozen = self.frozen;
        let mut out = Vec::new();
        for (i, (_, l)) in self.layers.iter_mut().enumerate() {
            if let Some((w, b)) = l.params_mut() {
                out.push((w, i >= frozen));
                out.push((b, i >= frozen));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i >= self.frozen)
            .filter_map(|(_, (_, l))| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config,
            layers: self.layers.iter().map(|(n, l)| (n.clone(), l.cast())).collect(),
            frozen: self.frozen,
        }
    }

    /// Stacks images into a `[B, 1, H, W]` batch.
    pub fn batch(&self, images: &[&Image]) -> Result<Tensor<T>, NnError> {
        let dim = self.config.flowpic_dim;
        let mut data = Vec::with_capacity(images.len() * dim * dim);
        for img in images {
            if img.size != dim {
                return Err(NnError::Shape(format!(
                    "network expects {dim}x{dim} inputs, got {0}x{0}",
                    img.size
                )));
            }
            data.extend(img.data.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(vec![images.len(), 1, dim, dim], data)
    }

    /// Runs layers `range` on `x`. In training mode (`rng` given) dropout is
    /// active and a tape for [`Network::backward`] is recorded.
    pub fn forward_range(
        &self,
        x: Tensor<T>,
        range: std::ops::Range<usize>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<T>, Option<Tape<T>>), NnError> {
        let train = rng.is_some();
        let mut caches = Vec::new();
        let mut h = x;
        for (_, layer) in &self.layers[range.clone()] {
            let (y, cache) = layer.forward(h, rng.as_deref_mut(), train)?;
            if let Some(c) = cache {
                caches.push(c);
            }
            h = y;
        }
        Ok((
            h,
            train.then_some(Tape {
                start: range.start,
                caches,
            }),
        ))
    }

    /// Evaluation-mode forward pass over the whole network.
    pub fn forward(&self, x: Tensor<T>) -> Result<Tensor<T>, NnError> {
        Ok(self.forward_range(x, 0..self.layers.len(), None)?.0)
    }

    /// Training-mode forward pass over the whole network.
    pub fn forward_train(&self, x: Tensor<T>, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tape<T>), NnError> {
        let (y, tape) = self.forward_range(x, 0..self.layers.len(), Some(rng))?;
        Ok((y, tape.expect("training forward records a tape")))
    }

    /// Backpropagates `grad` (gradient of the loss w.r.t. the tape's output)
    /// down to the first unfrozen layer covered by the tape.
    ///
    /// Returns the parameter gradients and, when the tape reaches layer 0
    /// with nothing frozen, the gradient w.r.t. the network input.
    pub fn backward(&self, tape: &Tape<T>, grad: Tensor<T>) -> Result<(Gradients<T>, Option<Tensor<T>>), NnError> {
        let end = tape.start + tape.caches.len();
        let mut per_layer: Vec<Option<(Tensor<T>, Tensor<T>)>> = vec![None; self.layers.len()];
        let mut g = grad;
        let stop = tape.start.max(self.frozen);
        for i in (stop..end).rev() {
            let (gx, pg) = self.layers[i].1.backward(&tape.caches[i - tape.start], g)?;
            per_layer[i] = pg;
            g = gx;
        }
        let mut grads = Vec::new();
        for (i, (_, l)) in self.layers.iter().enumerate() {
            if l.params().is_some() {
                match per_layer[i].take() {
                    Some((gw, gb)) => {
                        grads.push(Some(gw));
                        grads.push(Some(gb));
                    }
                    None => {
                        grads.push(None);
                        grads.push(None);
                    }
                }
            }
        }
        let input_grad = (stop == 0).then_some(g);
        Ok((Gradients { grads }, input_grad))
    }

    /// Copies parameters of identically named layers from `other`.
    pub fn copy_layers_from(&mut self, other: &Network<T>, names: &[&str]) -> Result<(), NnError> {
        for name in names {
            let src = other
                .layers
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| NnError::Config(format!("source network has no layer {name}")))?;
            let dst = self
                .layers
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| NnError::Config(format!("target network has no layer {name}")))?;
            if std::mem::discriminant(&src.1) != std::mem::discriminant(&dst.1) {
                return Err(NnError::Config(format!("layer {name} differs in type")));
            }
            if let (Some((sw, sb)), Some((dw, db))) = (src.1.params(), dst.1.params_mut()) {
                if sw.shape() != dw.shape() || sb.shape() != db.shape() {
                    return Err(NnError::Config(format!("layer {name} differs in shape")));
                }
                *dw = sw.clone();
                *db = sb.clone();
            }
        }
        Ok(())
    }

    /// Names of the parametric backbone layers.
    pub fn backbone_param_layers() -> [&'static str; 3] {
        ["conv1", "conv2", "fc1"]
    }
}
