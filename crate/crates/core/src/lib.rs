//! Semantic divergence detection for parallel corpora.
//!
//! The crate builds noisy synthetic supervision from any sentence-aligned
//! bitext, trains a cross-lingual pairwise word interaction model and two
//! baselines on it, evaluates them, and filters a corpus by score.
//!
//! Pipeline order: [`corpus`] → [`align`] → [`datagen`] → [`embed`] →
//! [`vdpwi`] / [`features`] → [`eval`] → [`select`]. [`pipeline`] wires the
//! whole chain behind a flat `key = value` configuration.

pub mod align;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod datagen;
pub mod dictionary;
pub mod embed;
pub mod error;
pub mod eval;
pub mod features;
pub mod par;
pub mod pipeline;
pub mod select;
pub mod synth;
pub mod vdpwi;
pub mod vocab;

pub use error::{Error, Result};
