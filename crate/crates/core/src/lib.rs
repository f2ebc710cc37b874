//! Robust losses and label-error detection on small from-scratch classifiers.
//!
//! The pipeline: generate or load a [`data::LabeledDataset`], inject label noise
//! with [`corruption::corrupt`], train [`net::Network`]s under a
//! [`losses::LossSpec`], then flag suspect samples with Confident Learning
//! ([`detect_cl`]) or Area Under the Margin ([`detect_aum`]) and score the flags
//! with [`metrics`]. [`harness`] ties these into reproducible experiments.

// `!(x >= 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corruption;
pub mod data;
pub mod detect_aum;
pub mod detect_cl;
pub mod exec;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod training;

pub use harness::{Error, ExperimentConfig};
