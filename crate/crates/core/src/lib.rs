//! Early detection of spatial-temporal incidents from crowdsourced reports.
//!
//! The crate turns timestamped user reports (plus optional traffic and weather
//! covariates) into gridded feature windows, trains a small convolutional
//! detector, compares it with a Bayesian-fusion baseline, and selects
//! deployment resolutions with an ε-dominance Pareto archive.

pub mod bf;
pub mod cli;
pub mod cnn;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod grid;
pub mod labels;
pub mod metrics;
pub mod mopt;
pub mod pipeline;
pub mod report;
pub mod sweep;
pub mod synth;

pub use error::{Error, Result};
