//! Training laboratory for entropy-controlled saliency losses.
//!
//! A small CAM-compatible CNN is trained on a procedurally generated
//! "real vs synthetic" image task with one of six losses: plain cross-entropy,
//! CYBORG (human-saliency MSE), HSEB (match a target CAM entropy), FMMMSE
//! (minimize CAM entropy), DROID (minimize log CAM entropy) and CYBORG+DROID.
//! Gradients come from the [`autodiff`] module; everything runs in `f64`.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod salience;
pub mod train;

pub use error::{Error, Result};
