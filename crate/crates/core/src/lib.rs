//! DRRNet: camouflaged object detection with omni-context and micro-detail
//! encoders, spatial and frequency fusion, and dual reverse refinement.

pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod context_encoder;
pub mod data;
pub mod decoder;
pub mod detail_encoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod pipeline;

pub use config::Config;
pub use error::{DrrnetError, Result};
pub use model::{DrrNet, Merge, ModelConfig};
