//! Globally convergent convexification solver for the 3D travel-time tomography problem
//! in a slab, in semidiscrete form: finite differences in (x, y, z) and a truncated
//! orthonormal expansion in the source position α.

pub mod basis;
pub mod config;
pub mod error;
pub mod grid;
pub mod io;
pub mod forward;
pub mod medium;
pub mod operator;
pub mod optimizer;
pub mod par;
pub mod pipeline;
pub mod run;

pub use error::{Error, Result};

// std's clock panics on wasm32-unknown-unknown.
#[cfg(not(target_arch = "wasm32"))]
pub(crate) use std::time::Instant;
#[cfg(target_arch = "wasm32")]
pub(crate) use web_time::Instant;
