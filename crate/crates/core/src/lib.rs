//! Forecasting engine built from a learnable periodic basis with a spectral
//! cycle filter, segmented frequency-domain residual learning, and an
//! optional pooled weekly branch.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fecf;
pub mod layout;
pub mod model;
pub mod multiscale;
pub mod report;
pub mod reproduce;
pub mod selfcheck;
pub mod sfpl;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
