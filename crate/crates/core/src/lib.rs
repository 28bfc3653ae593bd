//! Trajectory representation learning with a selective state-space encoder.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod geo;
pub mod gradsuite;
pub mod mamba;
pub mod par;
pub mod pipeline;
pub mod pretrain;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
