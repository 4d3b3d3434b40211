//! Sequence classifiers built from hidden Markov models whose states emit
//! through mixtures of normalizing-flow generators, with a diagonal
//! GMM-HMM baseline.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flow;
pub mod flow_hmm;
pub mod gmm;
pub mod hmm;
pub mod model;
pub mod nn;
pub mod presets;
pub mod scalar;

pub use checkpoint::{AnyModel, AnyTrainState, Checkpoint};
pub use data::{NoiseKind, Sequence, SequenceDataset, Standardizer};
pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowGenerator};
pub use flow_hmm::{EmReport, GenHmmModel, TrainConfig, TrainState};
pub use gmm::{GmmHmmModel, GmmTrainConfig, GmmTrainState};
pub use hmm::{HmmCore, MixtureWeights, PosteriorTables};
pub use model::{classify, Classification, SequenceModel};
pub use scalar::Real;

pub type GenHmm = GenHmmModel<f64>;
pub type GenHmm32 = GenHmmModel<f32>;
pub type GmmHmm = GmmHmmModel<f64>;
pub type GmmHmm32 = GmmHmmModel<f32>;
pub type Dataset = SequenceDataset<f64>;
pub type Dataset32 = SequenceDataset<f32>;
