//! Caption-based concept attribution for convolutional image classifiers.
//!
//! A classifier's convolution outputs are matched against the CLIP image
//! tower's by correlation, the best-matching maps are transplanted into CLIP
//! during inference, and the shift in caption similarities tells whether the
//! classifier relies on digit shape or on color.

pub mod attribution;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod fingerprint;
mod gemm;
pub mod matcher;
pub mod nets;
pub mod oracle;
pub mod pipeline;
pub mod plot;
pub mod probes;
pub mod raster;
pub mod surgeon;

pub use error::{Result, XaiError};
