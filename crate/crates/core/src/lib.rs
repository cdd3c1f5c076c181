//! Density-partitioned submodular coreset selection for trajectory-prediction
//! datasets.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`scene`] loads or synthesizes a [`Dataset`] of driving scenes.
//! 2. [`predictor`] briefly pretrains a small multimodal trajectory predictor.
//! 3. [`features`] turns every scene into a gradient feature: the output loss
//!    gradient pulled back to the decoder latent, multiplied element-wise by
//!    that latent.
//! 4. [`partition`] splits scenes into density buckets and assigns each a
//!    quota, processing the densest bucket first; [`select`] fills each quota
//!    greedily with a cosine-kernel gain.
//!
//! [`baselines`] provides random, k-means and herding selections over the same
//! features, and [`eval`] trains predictors on subsets and scores them with
//! minADE / minFDE / miss rate, stratified by density.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod features;
pub mod partition;
pub mod predictor;
pub mod rng;
pub mod scene;
pub mod select;

pub use error::{Error, Result};
pub use features::{FeatureRecord, FeatureSet};
pub use partition::{BudgetPlan, PartitionPlan, SelectionResult};
pub use predictor::{PredictorConfig, ToyPredictorParams};
pub use scene::{AgentTrack, Dataset, Point, Scene, SynthConfig};
