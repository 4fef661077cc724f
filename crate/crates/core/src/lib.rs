//! Referring image segmentation with coupled word-pixel and sentence-mask
//! alignment, built on a small dense-tensor autodiff engine.

pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod wpa;

pub use error::{Error, Result};
