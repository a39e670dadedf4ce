//! Sparse voxel reconstruction of clothed humans from multi-view images.
//!
//! All lengths are centimetres. Grid vertices are cell centred: vertex `i`
//! of a cube with origin `o` and spacing `h` sits at `o + (i + 0.5) h`.

pub mod error;
pub mod featproj;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod spatial;
pub mod sparsecnn;
pub mod sparsevol;
pub mod synth;
pub mod texture;
pub mod tsdf;

pub use error::{Error, ErrorKind, Result};
