//! Instruction-guided image editing trained from specialist-generated data
//! on a procedural shape world.

pub mod diffusion;
pub mod editnet;
pub mod evalbench;
pub mod error;
pub mod instruction;
pub mod microworld;
pub mod par;
pub mod pipeline;
pub mod record;
pub mod scoring;
pub mod specialists;
pub mod training;

pub use error::{Error, Result};
