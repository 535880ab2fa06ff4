//! Referring segmentation of lesions in grayscale chest X-rays with a causal-intervention
//! feature split, content-aware upsampling and a text-conditioned dynamic-kernel decoder.

pub mod carafe;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod text;
pub mod training;
pub mod vision;
pub mod viz;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{ModelOutput, SegModel};
pub use params::ParamStore;
