//! Geometric dense bundle adjustment over a neural implicit SDF map.
//!
//! Camera poses and a hash-grid SDF are optimized jointly by volume-rendering
//! optical flow (and stereo disparity) from the field and comparing it with
//! dense flow observations.

pub mod autodiff;
pub mod dba;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod io;
pub mod losses;
mod mc_tables;
pub mod mesh;
pub mod metrics;
pub mod rendering;
pub mod sampling;
pub mod synth;

pub use error::{Error, Result};
