//! Conditionally overlapping mixtures of experts over MLP backbones.
//!
//! A frozen random-projection network computes a k-winner-take-all mask for every
//! hidden layer of a trainable MLP, so each input runs through its own sub-network
//! and similar inputs share most of it. The crate provides the masked backbone
//! with manual backpropagation, the routing network, ten comparison baselines, a
//! deterministic training loop, dataset loaders and the verification experiments
//! (mask similarity, neuron utilization, NTK decomposition, gradient checks and
//! capacity sweeps).

pub mod analysis;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod routing;
pub mod training;

pub use backbone::{Activation, MlpSpec, ModelParams, Variant};
pub use baselines::BaselineConfig;
pub use data::{DataSplits, Dataset, Targets};
pub use error::{CometError, Result};
pub use model::{Model, Phase};
pub use numerics::{Matrix, RngStream};
pub use routing::{MaskSet, RoutingParams};
pub use training::{evaluate, train, RunRecord, TrainConfig};
