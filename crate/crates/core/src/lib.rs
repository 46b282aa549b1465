//! Iceberg-vs-ship classification of dual-polarization SAR scenes.
//!
//! The crate covers the whole pipeline: ingestion of competition-format
//! JSON, a synthetic scene generator, geometric and derivative image
//! transforms, per-band statistical features, a gradient-boosted tree
//! baseline, a small from-scratch CNN (with an autoencoder for transfer
//! learning), out-of-fold stacking and the evaluation harness.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod gbm;
pub mod harness;
pub mod image_ops;
pub mod nn;

pub use data::{ImagePlane, Label, Provenance, SampleSet, SarSample, SynthConfig};
pub use error::{Error, Result};
pub use features::{BandStats, FeatureVector};
pub use gbm::{GbmModel, GbmParams};
pub use nn::{Network, TrainConfig};
pub use ensemble::PredictionSet;
pub use harness::ConfusionMatrix;
