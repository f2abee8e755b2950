//! Tile-based differentiable rasterizer for semantic Gaussian scenes.
//!
//! Splats are sorted once per image by camera-space depth of their centers
//! (ties broken by primitive index) and composited front to back. Pixel `(x, y)`
//! is sampled at the integer coordinate `(x, y)`.

mod backward;
mod forward;
mod project;

pub use backward::{render_backward, RenderUpstream};
pub use forward::{prepare, render, PreparedScene, RenderOutput, RenderStats};
pub use project::{gaussian_weight, project_gaussian, Splat2D};

/// Primitives whose camera-space depth is at or below this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every projected covariance.
pub const LOW_PASS_DILATION: f64 = 0.3;
/// Upper bound on the per-splat alpha at any pixel.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Per-splat alphas below this are not composited.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Compositing stops before transmittance would fall below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
/// Kernel support in standard deviations; pixels outside the ellipse get no contribution.
pub const SUPPORT_SIGMA: f64 = 3.0;
/// Tile edge length in pixels.
pub const TILE_SIZE: usize = 16;
