//! Meta-learning engine for few-shot 2D segmentation on volumetric data.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod meta;
pub mod seed;
pub mod segnet;
pub mod tasks;

pub use error::{Error, Result};
