//! PCB defect detection: a YOLO-style detector with Res2Net blocks in the
//! feature-pyramid neck, built on a small f64 reverse-mode autodiff tensor.

pub mod data;
pub mod detector;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod postprocess;
pub mod res2net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
