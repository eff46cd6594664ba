//! Multi-modal stochastic trajectory prediction: a conditional variational
//! autoencoder whose scene context comes from capsule encoders over
//! rasterized road maps.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation
//! - [`geometry`]: reference frames and kinematic features
//! - [`raster`]: map rasterization into global and local chunks
//! - [`capsnet`]: capsule encoders for map layers and agent state
//! - [`cvae`]: recognition network, prior sampling and motion generator
//! - [`objectives`]: training loss and displacement metrics
//! - [`training`]: bounded Polyak step-size optimizer and fit loop
//! - [`data`]: synthetic scenes, scene files and training examples
//! - [`experiments`]: ablation drivers and published reference numbers
//! - [`report`]: CSV tables, SVG plots and markdown reports

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capsnet;
pub mod cvae;
pub mod data;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod model;
pub mod objectives;
pub mod raster;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
