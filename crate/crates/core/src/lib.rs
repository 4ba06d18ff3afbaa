//! Spatio-temporal disaggregation of aggregate time series.
//!
//! A region-level panel `Y` (`n` regions, `T` periods) follows a spatial
//! autoregression in space with AR(1) errors in time, while only the period
//! totals `Y_a = C Y` are observed. The crate estimates the model from the
//! totals and covariates, then predicts the panel with a constrained BLUP that
//! reproduces the totals exactly and, optionally, a set of known cells.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod dataprep;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod io;
pub mod model;
pub mod predictor;
pub mod simulation;
pub mod weights;

pub use error::{Error, ErrorClass, Result};
