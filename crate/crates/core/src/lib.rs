//! Exemplar-driven object reposing: paired data generation, patch
//! correspondence, flow warping, re-rendering and evaluation.

pub mod correspondence;
pub mod datagen;
pub mod descriptor;
pub mod error;
pub mod evalmetrics;
pub mod generator;
pub mod image;
pub mod losses;
mod nn;
pub mod train;
pub mod warp;

pub use error::{CoreError, Result};
