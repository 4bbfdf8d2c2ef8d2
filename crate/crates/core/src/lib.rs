//! MFF-EINV2 sound event localization and detection: first-order Ambisonics
//! features, the multi-scale feature fusion network, permutation-invariant
//! training and the location-aware detection metrics.

pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod labels;
pub mod layers;
pub mod metrics;
pub mod mff;
pub mod network;
pub mod probe;
pub mod synth;
pub mod training;
pub mod verify;

pub use config::Config;
pub use error::{ConfigError, Result, SeldError};
