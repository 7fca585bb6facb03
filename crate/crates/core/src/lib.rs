//! Bayesian recurrent networks for multi-step solar generation forecasting.

pub mod autodiff;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod forecast;
pub mod metrics;
pub mod recurrent;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
