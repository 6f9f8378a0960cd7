//! Semantic-flow trajectory-pooled descriptors for traffic near-miss video
//! classification.
//!
//! Dense trajectories are tracked through Farnebäck flow, split into
//! foreground and background channels by per-frame semantic masks, pooled
//! over multi-scale feature maps, VLAD-encoded per channel and classified
//! with one-vs-rest linear SVMs. A deterministic scene generator produces
//! TTC-labelled clips with exact masks for end-to-end runs.

pub mod binfmt;
pub mod classifier;
pub mod clipio;
pub mod denseflow;
pub mod encoding;
pub mod error;
pub mod featuremaps;
pub mod grid;
pub mod pipeline;
pub mod idtdesc;
pub mod scalar;
pub mod semanticflow;
pub mod synthscenes;
pub mod tddpool;
pub mod trajectories;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used from encoding onwards.
pub type Real = f64;
/// Feature maps as stored and pooled.
pub type Map = featuremaps::FeatureMap<f32>;
/// Descriptor sets as dumped to disk.
pub type Descriptors = tddpool::DescriptorSet<f32>;
pub type Pca = encoding::PcaModel<Real>;
pub type Vocabulary = encoding::Codebook<Real>;
pub type Classifier = classifier::LinearModel<Real>;
