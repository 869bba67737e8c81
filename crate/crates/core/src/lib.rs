//! Referring-expression video grounding with dual correspondence learning.

pub mod config;
pub mod correspondence;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod grounding;
pub mod model;
mod params;
pub mod synthgen;
pub mod train_eval;
pub mod viz;

pub use error::{Error, Result};
