//! Desk-scale laboratory for multi-task end-to-end speech translation.
//!
//! Three tasks share one encoder–decoder: speech translation (ST), CTC
//! speech recognition (ASR) on the acoustic encoder, and text translation
//! (MT) through the textual encoder and decoder. The crate provides the
//! autodiff engine, a synthetic corpus, the model, its losses, CTC-driven
//! length shrinking with look-back attention, task-impact weight scheduling,
//! gradient-consistency analysis, and the training harness.

pub mod analysis;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod report;
pub mod scheduler;
pub mod shrink;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
