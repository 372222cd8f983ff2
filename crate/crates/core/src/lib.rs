//! Multi-view spatio-temporal action recognition at desk scale: a small
//! tensor/autodiff substrate, masked multi-head attention split into
//! same-view and different-view sublayers, RoIAlign person feature
//! extraction, a synthetic multi-view occlusion benchmark, and a
//! training/evaluation harness.

pub mod data;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Elem, Tape, Tensor, Var};
