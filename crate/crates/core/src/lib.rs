//! CPU engine for the HarDNet-MSEG segmentation network.
//!
//! The crate builds the network as a static dataflow [`graph::Graph`]
//! (HarDNet-68 style encoder, RFB skip modules, multiplicative partial decoder),
//! runs it on dense NCHW [`tensor::Tensor4`] values, differentiates it with a
//! small reverse-mode [`autodiff::Tape`], and ships the evaluation metrics,
//! a per-layer cost analyzer and a synthetic-data trainer around it.

pub mod analyzer;
pub mod autodiff;
pub mod decoder;
pub mod error;
pub mod graph;
pub mod hardnet;
pub mod io;
pub mod metrics;
pub mod preset;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
