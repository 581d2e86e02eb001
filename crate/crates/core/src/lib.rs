//! Monocular depth estimation with windowed cross-attention skip fusion.
//!
//! The crate implements, end to end and on its own tensor engine:
//!
//! - a reverse-mode differentiated tensor core ([`tensor`]),
//! - windowed multi-head cross-attention with relative position bias
//!   ([`attention`]),
//! - a small convolutional encoder producing a 1/4..1/32 feature pyramid
//!   ([`backbone`]),
//! - a query-refinement decoder with pyramid-pooled query initialisation,
//!   attention-based skip fusion, pixel-shuffle upsampling and two
//!   convolutional fusion baselines ([`decoder`]),
//! - adaptive depth binning and probability-weighted depth composition
//!   ([`bins`]),
//! - the scale-invariant log loss and standard depth metrics ([`metrics`]),
//! - synthetic scenes, PFM / 16-bit PNG depth files and checkpoints
//!   ([`data`]),
//! - training, inference and evaluation drivers used by the `skipdepth`
//!   binary ([`train`], [`infer`], [`eval`]).
//!
//! Everything is generic over the run precision: f64 for numerical
//! verification, f32 for training.

pub mod attention;
pub mod backbone;
pub mod bins;
pub mod check;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::{grad_check, Parameter, Tensor};
