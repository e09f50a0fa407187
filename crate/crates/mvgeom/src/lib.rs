//! Desk-scale engine for inference-time multi-view consistency: depth-aware
//! feature rendering, consistent-aware latent completion, pose-conditioned
//! feature-field rendering, and progressive spatio-temporal attention,
//! verified against synthetic scenes with exact geometry.

// `!(x > 0.0)` rejects NaN alongside non-positive values; `x <= 0.0` would
// let NaN through. Indexed loops over parallel grids are kept as-is.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod camera;
pub mod denoiser;
pub mod depthmesh;
pub mod error;
pub mod featurefield;
pub mod grid;
pub mod metrics;
pub mod pipeline;
pub mod rasterizer;
pub mod runconfig;
pub mod scheduler;
pub mod synthscene;

pub use error::{MvError, Result};
