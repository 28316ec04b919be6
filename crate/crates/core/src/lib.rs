//! Lung infection segmentation from CT slices: an edge- and reverse-attention
//! segmentation network, its losses and metrics, a pseudo-label
//! semi-supervised loop and a multi-class refinement head.
//!
//! The numeric core is a small f64 NCHW tensor with a tape-based autograd.
//! Per-sample and per-plane work runs on rayon when the `parallel` feature is
//! enabled (the default) and sequentially otherwise.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod multiclass;
pub mod nn;
pub mod optim;
pub mod par;
pub mod plane;
pub mod resample;
pub mod semisup;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
