//! File formats, batch drivers and the command-line front end for
//! `strokeseg-core`.
//!
//! - [`vol`]: the VOL volume format (JSON sidecar + raw body).
//! - [`manifest`]: the dataset index CSV.
//! - [`checkpoint`]: binary network + optimizer checkpoints.
//! - [`config`]: the run configuration and its presets.
//! - [`corpus`], [`prep`], [`train`], [`eval`]: the pipeline stages.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod logging;
pub mod manifest;
pub mod prep;
pub mod train;
pub mod vol;

pub use error::{Error, Result};
