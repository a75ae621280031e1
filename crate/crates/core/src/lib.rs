//! Weakly supervised anomaly detection over patch features.
//!
//! Normal training images populate a [`NormalBank`] of aggregated patch
//! features. Patches of the few labelled anomaly images are scored by their
//! nearest-neighbor distance to the bank, and only the most distant fraction
//! is kept ([`mining::mine`]). That set is enlarged by interpolating towards
//! bank rows ([`mining::linear_mix`]), and an MLP [`Discriminator`] is
//! trained with a hinge loss to score normals below 0 and anomalies above 1.
//! At test time the discriminator alone produces a patch-level anomaly map
//! whose maximum is the image score.

pub mod discriminator;
pub mod error;
pub mod eval;
pub mod feature_io;
pub mod inference;
pub mod memory_bank;
pub mod mining;
pub mod pipeline;
pub mod run;

pub use discriminator::{Discriminator, TrainConfig};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use feature_io::{
    DatasetManifest, FeatureMap, FeatureMatrix, PatchFeature, PatchOrigin, SynthConfig,
};
pub use inference::{AnomalyMap, ImageResult};
pub use memory_bank::NormalBank;
pub use mining::{AugmentedAnomalySet, MinedAnomalySet};
pub use pipeline::{AggregationConfig, PatchSet};
pub use run::RunConfig;
