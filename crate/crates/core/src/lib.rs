//! Core building blocks for removing an object and its cast shadows from an
//! image: float image containers and file formats, seeded procedural scenes,
//! a direct-lighting ray tracer, training-sample assembly and evaluation
//! metrics.
//!
//! Everything in this crate is a pure function of its inputs (and of an
//! explicit seed where randomness is involved), so callers may parallelize
//! freely.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod inpaint;
pub mod io;
pub mod render;
pub mod scene;
pub mod util;

pub use error::{CoreError, Result};
pub use image::{ImageBuffer, MaskImage};
