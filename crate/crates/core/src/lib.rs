//! Style-statistics manipulation for domain generalization.
//!
//! The crate covers channel statistics and style vectors, the common style
//! transforms (AdaIN, MixStyle, DSU, EFDM, EFDMix), per-class style balancing
//! inside a mini-batch, test-time style shifting against a registry of
//! source-domain centroids, a small convolutional network with hook points,
//! a synthetic multi-domain dataset and the experiment harness behind the
//! `styleshift` binary.

pub mod balance;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kmeans;
pub mod net;
pub mod report;
pub mod rng;
pub mod shift;
pub mod style_ops;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureBatch, FeatureMap, StyleVector};
