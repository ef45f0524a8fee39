//! Calibration-aware training toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense `f64` tensors with a dynamic reverse-mode tape.
//! * [`datasets`]: seeded Gaussian-mixture data, stratified splits, CSV I/O.
//! * [`mixup`]: Beta-distributed mixing coefficients and multi-sample groups.
//! * [`losses`]: cross-entropy, the mixup ranking hinge loss and M-NDCG.
//! * [`metrics`]: ECE, adaptive ECE, over/under-confidence error, AUROC.
//! * [`calibrate`]: post-hoc temperature scaling.
//! * [`train`]: MLP, SGD with momentum and the training loop.

pub mod calibrate;
pub mod datasets;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mixup;
pub mod numerics;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
