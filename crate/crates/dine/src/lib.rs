//! Std companion to `dine-core`: checkpoints, prediction caches, the NDJSON
//! predictor service, experiment configs and the command-line harness.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod service;

pub use crate::error::{Error, Result};
