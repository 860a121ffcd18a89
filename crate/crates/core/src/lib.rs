//! Vanishing-point guided video semantic segmentation primitives.

pub mod autodiff;
pub mod cma;
pub mod ctnsr;
pub mod dense;
pub mod error;
pub mod exec;
pub mod layers;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod proximity;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod vp;

pub use error::{Error, Result};
pub use exec::Exec;
pub use raster::{GrayImage, InstanceMap, InvalidMask, LabelMap, Rect, IGNORE_LABEL};
pub use tensor::Tensor;
pub use vp::{detect_vp, VpConfig, VpEstimate};
