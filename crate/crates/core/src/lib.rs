//! Flowpic-based traffic classification experiments.
//!
//! The crate is organized bottom-up:
//!
//! * [`dataio`]: JSON Lines flow datasets, curation filters and split manifests.
//! * [`flowpic`]: time by packet-size histograms and model inputs.
//! * [`augment`]: time-series and image augmentations, contrastive view pairs.
//! * [`nn`]: LeNet-style CNNs, InfoNCE, training loops and checkpoints.
//! * [`boost`]: gradient-boosted tree baseline.
//! * [`stats`]: metrics, confidence intervals, ranking and post-hoc tests.
//! * [`synth`]: synthetic datasets with separable classes.
//! * [`campaign`]: experiment grids, parallel execution and reports.

pub mod augment;
pub mod boost;
pub mod campaign;
pub mod dataio;
pub mod flowpic;
pub mod nn;
pub mod stats;
pub mod synth;

pub use augment::AugmentationSpec;
pub use dataio::{Dataset, FlowRecord, PacketSeries, SplitManifest};
pub use flowpic::{build_flowpic, Flowpic, FlowpicConfig, Image};
