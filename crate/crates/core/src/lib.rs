//! Deterministic desk-scale simulator for class-wise federated averaging.
//!
//! The library covers the full pipeline: a minimal dense classifier with
//! exact backprop ([`nn`]), non-IID dataset partitioning ([`data`]),
//! weight-norm class-distribution estimation with its regularizer ([`wdr`]),
//! the federated round loop and baselines ([`federation`]), metric and CSV
//! export ([`metrics`]), and the declarative experiment runner
//! ([`config`], [`experiment`]).

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod verify;
pub mod wdr;

pub use error::{Error, Result};
