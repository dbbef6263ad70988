//! Adversarial thermal-infrared patch toolkit.
//!
//! Models patches as superpositions of 2D Gaussian "bulb" spots, optimizes
//! their layout to suppress pedestrian-detector objectness under random
//! physical transformations, evaluates the result with PR/AP metrics, and
//! exports the final layout as a physical board plan.

pub mod attack;
pub mod board;
pub mod calibrate;
pub mod config;
pub mod detect;
pub mod error;
pub mod evaluate;
pub mod gaussian;
pub mod image;
mod rngutil;
pub mod scenegen;
pub mod transforms;

pub use error::{Error, Result};
