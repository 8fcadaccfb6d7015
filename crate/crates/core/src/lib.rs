//! Instruction-driven radiance field editing by iterative dataset update.

pub mod color;
pub mod control;
pub mod dataset_update;
pub mod editor;
pub mod error;
pub mod field;
pub mod fixtures;
pub mod image;
pub mod metrics;
pub mod renderer;
pub mod scene_io;
pub mod trainer;

pub use error::{Error, Result};
