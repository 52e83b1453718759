//! Masked image modelling that mimics a teacher's visible-token features
//! before reconstructing the masked pixels.

mod binio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod params;
pub mod patch_mask;
pub mod probe;
pub mod teacher;
pub mod tensor;
pub mod trainer;
pub mod visualize;

pub use error::{Error, Result};
