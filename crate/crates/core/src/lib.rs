//! Sharpness-aware synthetic calibration data for zero-shot quantization.
//!
//! A small full-precision teacher is quantized to a low-bit copy without
//! access to its training data. A generator is trained to produce images whose
//! batch statistics match the teacher's stored BN statistics and whose
//! per-sample fc-layer gradients are diverse and stable under small
//! embedding perturbations; the quantized copy is then calibrated on the
//! generated images by adaptive rounding.

pub mod calibration;
pub mod data;
mod error;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod synthesis;

pub use error::{Result, SadagError};
