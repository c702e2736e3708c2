//! Command line front end of the privacy-preserving anomaly detection
//! pipeline: configuration, stage manifests and the stages themselves.

pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use pipeline::{Method, Pipeline};
