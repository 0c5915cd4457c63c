//! Adaptive spatial fusion of pyramid features, built on a small
//! reverse-mode autograd engine, with a gradient-consistency analyzer and a
//! synthetic multi-scale detection task to train and compare fusion modes.

pub mod autograd;
pub mod consistency;
pub mod detection;
pub mod error;
pub mod fusion;
pub mod model;
pub mod ops;
pub mod params;
pub mod pgm;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
