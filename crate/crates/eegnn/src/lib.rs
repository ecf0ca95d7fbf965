//! Graph-neural-network classification for multi-channel EEG-style feature
//! data: four GNN model variants, intra-/cross-subject splitting, and three
//! cross-validation protocols (CV, FCV and nested CV with grid tuning) whose
//! data accesses are audit-logged so leakage freedom can be demonstrated
//! rather than assumed.
//!
//! The crate is organized around a small set of modules:
//!
//! - [`dataio`] — dataset model, bit-exact on-disk format, synthetic generator
//! - [`features`] — band-filtered differential-entropy extraction and LDS smoothing
//! - [`graph`] — adjacency construction and symmetric normalization
//! - [`models`] — the GNN classifiers and their training step
//! - [`splitting`] — intra- and cross-subject K-fold plans
//! - [`protocols`] — CV / FCV / NCV with audit instrumentation
//! - [`cli`] — JSON experiment config and the run/sweep/synth/extract commands

pub mod autodiff;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod features;
pub mod graph;
pub mod models;
pub mod protocols;
pub mod splitting;

pub use error::{Error, Result};
