//! Calibrated, difficulty-aware pseudo-labels from recorded training
//! dynamics, plus the evaluation used to judge them: class-balanced
//! accuracy/MAE/ECE, selective classification (AURC) and worst-case
//! study-level fusion.
//!
//! Typical flow: record per-epoch logits ([`data_model`]), fit a temperature
//! or Dirichlet map on the validation split ([`calibration`]), turn the
//! training trajectories into soft targets ([`pseudo_label`]), retrain,
//! then evaluate ([`metrics`], [`fusion`]). [`simulator`] provides seeded
//! synthetic data and a linear trainer so the whole loop runs at desk scale;
//! [`pipeline`] wires the stages together for the CLI.

pub mod calibration;
pub mod data_model;
pub mod error;
pub mod fusion;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod pseudo_label;
pub mod simulator;

pub use error::{Error, Result};
