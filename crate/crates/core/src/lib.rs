//! Conflict-exposure trends from gridded monthly event counts.
//!
//! The crate estimates temporal (TCE) and tempo-spatial (TSCE) exposure
//! trends with additive Gaussian processes, turns them into 24 trend
//! features, selects a subset by forward selection and forecasts conflict
//! probability with an ensemble of random forests.
//!
//! Stages:
//! - [`data`]: event ingestion, magnitude transform, dense timelines, splits
//! - [`gp`]: kernels, marginal likelihood, MAP fitting, posterior prediction
//! - [`temporal`] / [`spatial`]: the TCE and pseudo-3D SCE/TSCE pipelines
//! - [`features`]: slope, acceleration, cumulative mass and forward selection
//! - [`forest`]: CART forests and the jittered ensemble
//! - [`metrics`]: PR/ROC curves, AP, AUC, thresholds and confusion maps
//! - [`synth`]: synthetic ground truth sampled from the generative model
//! - [`config`] / [`pipeline`]: file-based orchestration used by the CLI

pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod forest;
pub mod gp;
pub mod metrics;
pub mod pipeline;
pub mod spatial;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};
