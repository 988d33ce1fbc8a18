//! Color-budgeted dataset distillation.

pub mod codec;
pub mod config;
pub mod distill;
pub mod error;
pub mod io;
pub mod nn;
pub mod palette;
pub mod quantize;
pub mod repro;
pub mod selector;

pub use error::{Error, Result};
