//! Large-margin training for deep networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`graph`]: dense `f64` tensors and a tape-based
//!   reverse-mode autodiff graph with stop-gradient support.
//! - [`net`]: multilayer perceptrons that expose every intermediate
//!   representation for margin computations, plus a binary checkpoint format.
//! - [`margin`]: dual-norm distances, the multi-layer margin loss and the
//!   cross-entropy / hinge baselines.
//! - [`optim`]: SGD with momentum and RMSProp.
//! - [`attack`]: FGSM, iterated FGSM and Gaussian perturbations.
//! - [`data`]: toy 2-D datasets, IDX loading, label noise and subsampling.
//! - [`harness`]: config-driven training, sweeps and report files.

pub mod attack;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod margin;
pub mod net;
pub mod optim;
pub mod tensor;

pub use attack::{AttackConfig, AttackKind, AttackLoss, AttackResult, AttackRow};
pub use data::{Dataset, ToyPattern};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use harness::{ExperimentConfig, LossSpec, RunReport, Splits, Task};
pub use margin::{Aggregator, Clip, LayerSet, MarginConfig, NormExponent, PairDistance};
pub use net::{ForwardTrace, LayerSpec, Model};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::Tensor;
