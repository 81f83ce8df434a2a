//! Structure-aware protein encoding, protein-text alignment and
//! mixture-of-experts instruction tuning at desk scale.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod autograd;
pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod lm;
pub mod metrics;
pub mod moe;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use data::{InstructionRecord, ProteinRecord, TaskType};
pub use error::{Error, Result};
pub use geometry::{CoordinateSet, KernelBank};
pub use params::{ParamStore, Provenance};
pub use tensor::Mat;
pub use pipeline::{Checkpoint, ModelConfig, TrainConfig};
