//! Introspective classifiers: a single network that both classifies and
//! synthesizes its own pseudo-negatives, trained by alternating synthesis and
//! reclassification, plus an exact grid-density oracle for 2D verification.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod image;
pub mod layers;
pub mod network;
pub mod oracle;
pub mod record;
pub mod rng;
pub mod robustness;
pub mod sampler;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use layers::{Architecture, LayerSpec, NetworkParams};
pub use network::{BinaryClassifier, MulticlassClassifier, Network, OneVsAllEnsemble};
pub use record::{ComputationRecord, NodeId};
pub use tensor::Tensor;
