//! Adaptive feature relevance and visual explanations for convolutional
//! networks.
//!
//! The pipeline consumes a [`tensor_store::TensorBundle`] (activation and
//! gradient of one convolutional layer for one image and class), scores every
//! unit by counting peaks of an adaptive-bandwidth density of its gradient
//! values ([`scoring`]), builds one saliency map per score value
//! ([`saliency`]) and evaluates the maps against a model runner
//! ([`metrics`], [`runner`], [`ablation`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod error;
pub mod evaluate;
pub mod golden;
pub mod imageio;
pub mod kde;
pub mod metrics;
pub mod numfmt;
pub mod report;
pub mod runner;
pub mod saliency;
pub mod scoring;
pub mod tensor_store;

pub use error::{Error, Result};
