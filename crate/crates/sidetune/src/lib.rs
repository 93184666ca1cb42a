//! Multimodal side-tuning for document classification.
//!
//! A frozen, pre-trained image encoder (the base) is combined with two
//! trainable side networks — a second image encoder and a text CNN — through
//! a fixed linear blend `R(x) = a0*B(x) + a1*S1(x) + a2*S2(x)` with
//! nonnegative coefficients summing to one. The blended representation feeds
//! an optional dense layer and a classification head. The crate also ships
//! the dataset plumbing (folder-per-class and index-file corpora, random
//! splits, an external OCR client), the SGD training loop with the
//! square-root epoch schedule, evaluation reporting, alpha-grid sweeps, and
//! a single-document inference profiler.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod ocr;
pub mod profile;
pub mod report;
pub mod runconfig;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use fusion::{combine, AlphaConfig, Encoding};
pub use model::FusedEncoder;
pub use train::{evaluate, lr_at, EvalReport, TrainConfig};
