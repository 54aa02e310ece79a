// Index loops mirror the dynamic-programming recurrences they implement.
#![allow(clippy::needless_range_loop)]

//! Ensemble distillation for desk-scale structured prediction.
//!
//! This crate trains small sequence taggers (IID softmax, linear-chain CRF,
//! first-order autoregressive), ensembles their token-level distributions,
//! memoizes truncated teacher distributions to disk, distills ensembles into
//! single student models, and evaluates both task performance and calibration
//! (Brier, stratified Brier, adaptive-binned ECE, balanced ECE/Brier, top-k
//! ECE, temperature scaling, PR curves).

pub mod calibration;
pub mod data;
pub mod distill;
pub mod ensembling;
pub mod error;
pub mod eval;
mod math;
pub mod taggers;
pub mod training;

pub use error::{Error, Result};
