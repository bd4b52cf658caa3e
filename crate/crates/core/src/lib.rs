//! Universal adversarial patches against traffic-light detectors.
//!
//! The crate trains a single printable patch that, placed directly under a
//! traffic light, re-labels the light's detected state while keeping its
//! box in place, and measures the attack through label-flip, vanish and
//! fabrication rates plus average precision on clean and patched frames.
//!
//! Modules:
//! - [`types`]: tensors, boxes, patches, configuration profiles.
//! - [`compositor`]: differentiable under-light patch placement and
//!   perspective warping.
//! - [`losses`]: smoothness and lit-color-suppression regularizers.
//! - [`detector`]: the context-aware blob detector being attacked.
//! - [`trainer`]: Adam-driven projected gradient descent over a dataset.
//! - [`evaluator`]: outcome bucketing, fabrication flags, average
//!   precision.
//! - [`data`]: dataset, patch-bundle and print-export formats.
//! - [`synthetic`]: benchmark scene rendering.

pub mod compositor;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod synthetic;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
