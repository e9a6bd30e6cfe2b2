//! Joint imputation of missing node features and missing weighted edges in
//! networked time series.
//!
//! The pipeline: [`synth`] generates datasets with known truth, [`data`]
//! holds them and exposes the observed view, [`rwr`] computes position
//! embeddings, [`model`] runs the bidirectional graph-enhanced VAE built from
//! [`nn`] blocks, [`train`] fits it and [`checkpoint`] stores it,
//! [`baselines`] and [`eval`] provide comparisons and metrics, and [`cli`]
//! ties everything together.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod rwr;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
