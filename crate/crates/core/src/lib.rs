//! Fixed-length summaries of variable-length multi-axis time series.
//!
//! A bout (one recording of a single activity) is cut into disjoint windows,
//! each window is described by per-axis percentile and lag-1 autocorrelation
//! features, and a variational Bayesian Gaussian mixture fitted over all
//! training windows assigns every window to a cluster. The ratio of a bout's
//! windows falling in each cluster is its summary vector, which then drives
//! activity classification and per-class energy-expenditure regression.
//!
//! Modules follow the pipeline order:
//!
//! - [`dataset`]: bouts, corpora, the CSV corpus format, the synthetic generator
//!   and leave-one-subject-out folds.
//! - [`features`]: windowing and the per-window feature vector.
//! - [`vbgmm`]: variational mixture fitting, responsibilities, assignment.
//! - [`summarize`]: cluster-ratio summary vectors.
//! - [`classify`]: the small neural network used for classification and the
//!   window-voting baseline.
//! - [`regress`]: least squares, per-class regression suites and baselines.
//! - [`evaluate`]: cross-validated evaluation of every method.
//!
//! Data-parallel loops (per-bout featurization, batch assignment, folds) go
//! through [`par::Execution`]; with the `parallel` feature disabled every
//! loop runs sequentially and produces identical results.

pub mod classify;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod par;
pub mod reference;
pub mod regress;
pub mod summarize;
pub mod vbgmm;

pub use error::{Error, Result};
