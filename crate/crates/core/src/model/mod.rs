//! The student: optional masked conv stages, a ViT encoder with multi-layer
//! fusion, the linear mimic head and the pixel decoder.

mod config;
pub mod layers;
mod student;

pub use config::{ConvStage, MaskingMode, ModelConfig};
pub use student::{param_count, DecoderOutput, EncoderOutput, Student};
