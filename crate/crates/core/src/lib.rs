//! Differentiable semantic Gaussian splatting.
//!
//! Gaussians carry geometry, color, opacity and an open-vocabulary semantic
//! feature. Scenes are rendered by depth-sorted alpha blending, supervised by
//! photometric, semantic and geometric losses with analytic gradients, and
//! evaluated with image, depth and segmentation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod error;
pub mod fit;
pub mod fusion;
pub mod gaussian;
pub mod grad;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod scene;
pub mod semantic;
pub mod synth;

pub use error::{Error, Result};
