//! Small CNN toolkit: tensors, layers with hand-written backward passes,
//! losses, optimizers, training loops and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMetadata, EpochRecord};
pub use layers::{Conv2d, Layer, Linear};
pub use loss::{argmax, cross_entropy, info_nce, softmax, InfoNceOutput};
pub use network::{Gradients, NetMode, Network, NetworkConfig, Tape, BACKBONE_LAYERS};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{Scalar, Tensor};
pub use train::{
    evaluate, finetune, pretrain_simclr, simclr_batch_views, train_supervised, Evaluation, LabeledImages, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("projection {0} has zero norm")]
    ZeroNorm(usize),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not match the requested network: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
}
