use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2};
use rayon::prelude::*;

use super::forward::{prepare, walk_pixel, Contribution};
use crate::error::{Error, Result};
use crate::gaussian::{activation_vjp, covariance_vjp};
use crate::grad::{GradientBundle, PrimitiveGrad};
use crate::scene::{Camera, GaussianScene, ImageBuffer, Vec3};

/// Per-pixel gradients of a scalar loss with respect to every render output.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderUpstream {
    pub color: ImageBuffer,
    pub features: ImageBuffer,
    pub depth: ImageBuffer,
    pub alpha: ImageBuffer,
}

impl RenderUpstream {
    pub fn zeros(width: usize, height: usize, compressed_dim: usize) -> Self {
        Self {
            color: ImageBuffer::zeros(width, height, 3),
            features: ImageBuffer::zeros(width, height, compressed_dim),
            depth: ImageBuffer::zeros(width, height, 1),
            alpha: ImageBuffer::zeros(width, height, 1),
        }
    }

    fn check(&self, camera: &Camera, dc: usize) -> Result<()> {
        let (w, h) = (camera.width, camera.height);
        for (img, ch, name) in [
            (&self.color, 3, "color"),
            (&self.features, dc, "features"),
            (&self.depth, 1, "depth"),
            (&self.alpha, 1, "alpha"),
        ] {
            if img.width != w || img.height != h || img.channels != ch {
                return Err(Error::mismatch(
                    "render upstream",
                    format!("{name} {w}x{h}x{ch}"),
                    img.shape_str(),
                ));
            }
        }
        Ok(())
    }
}

/// Screen-space gradient accumulator for one splat.
#[derive(Clone)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    /// Σ over pixels of dL/dpower · d dᵀ.
    power_outer: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
    features: Vec<f64>,
    depth: f64,
}

impl SplatGrad {
    fn zeros(dc: usize) -> Self {
        Self {
            mean2d: Vector2::zeros(),
            power_outer: Matrix2::zeros(),
            opacity: 0.0,
            color: [0.0; 3],
            features: vec![0.0; dc],
            depth: 0.0,
        }
    }

    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        self.power_outer += o.power_outer;
        self.opacity += o.opacity;
        for (a, b) in self.color.iter_mut().zip(&o.color) {
            *a += b;
        }
        for (a, b) in self.features.iter_mut().zip(&o.features) {
            *a += b;
        }
        self.depth += o.depth;
    }
}

/// Analytic gradient of `Σ_pixels ⟨upstream, render(scene, camera)⟩` with
/// respect to every primitive's center, raw opacity, color, raw scale, raw
/// rotation and compressed feature.
///
/// Mirrors the forward pass decisions exactly: clamped alphas pass no
/// gradient to opacity or kernel, and skipped or terminated splats pass none.
pub fn render_backward(
    scene: &GaussianScene,
    camera: &Camera,
    upstream: &RenderUpstream,
) -> Result<GradientBundle> {
    if !scene.is_compressed() {
        return Err(Error::FeaturesNotCompressed);
    }
    let dc = scene.compressed_dim;
    upstream.check(camera, dc)?;
    let prepared = prepare(scene, camera);
    let splats = &prepared.splats;
    let payload_len = 3 + dc + 2;
    let payloads: Vec<Vec<f64>> = splats
        .iter()
        .map(|s| {
            let p = &scene.primitives[s.source_index];
            let mut v = Vec::with_capacity(payload_len);
            v.extend(p.color.iter());
            v.extend(p.sem_compressed.as_deref().unwrap_or_default());
            v.push(s.depth);
            v.push(1.0);
            v
        })
        .collect();

    let tile_grads: Vec<Vec<SplatGrad>> = (0..prepared.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let order = &prepared.tiles[tile];
            let mut local_index = vec![usize::MAX; 0];
            local_index.resize(splats.len(), usize::MAX);
            for (l, &k) in order.iter().enumerate() {
                local_index[k] = l;
            }
            let mut grads = vec![SplatGrad::zeros(dc); order.len()];
            let mut contribs: Vec<Contribution> = Vec::new();
            let mut g = vec![0.0; payload_len];
            for (x, y) in prepared.tile_pixels(tile) {
                let p = y * prepared.width + x;
                g[..3].copy_from_slice(upstream.color.pixel(p));
                g[3..3 + dc].copy_from_slice(upstream.features.pixel(p));
                g[3 + dc] = upstream.depth.data[p];
                g[4 + dc] = upstream.alpha.data[p];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                contribs.clear();
                walk_pixel(splats, order, x, y, |c| contribs.push(*c));

                // Signal carried by everything behind the current splat.
                let mut behind = 0.0;
                for c in contribs.iter().rev() {
                    let payload = &payloads[c.splat];
                    let signal: f64 = payload.iter().zip(&g).map(|(v, u)| v * u).sum();
                    let d_alpha = c.transmittance * (signal - behind);
                    behind = c.alpha * signal + (1.0 - c.alpha) * behind;

                    let acc = &mut grads[local_index[c.splat]];
                    let weight = c.alpha * c.transmittance;
                    for (a, u) in acc.color.iter_mut().zip(&g[..3]) {
                        *a += weight * u;
                    }
                    for (a, u) in acc.features.iter_mut().zip(&g[3..3 + dc]) {
                        *a += weight * u;
                    }
                    acc.depth += weight * g[3 + dc];

                    if c.clamped {
                        continue;
                    }
                    let s = &splats[c.splat];
                    acc.opacity += c.kernel * d_alpha;
                    let d_power = s.opacity * d_alpha * c.kernel;
                    let d = Vector2::new(c.dx, c.dy);
                    // power = -½ dᵀ Q d with d = p − m  ⇒  ∂power/∂m = Q d
                    acc.mean2d += s.conic * d * d_power;
                    acc.power_outer += d * d.transpose() * d_power;
                }
            }
            grads
        })
        .collect();

    let mut screen = vec![SplatGrad::zeros(dc); splats.len()];
    for (tile, grads) in tile_grads.iter().enumerate() {
        for (l, gr) in grads.iter().enumerate() {
            screen[prepared.tiles[tile][l]].add(gr);
        }
    }

    let mut bundle = GradientBundle::zeros(scene.len(), scene.sem_dim, dc);
    for (s, sg) in splats.iter().zip(&screen) {
        let prim = &scene.primitives[s.source_index];
        let out = &mut bundle.primitives[s.source_index];
        chain_to_primitive(s, sg, prim, camera, scene.median_depth, out)?;
    }
    Ok(bundle)
}

fn chain_to_primitive(
    s: &crate::raster::Splat2D,
    sg: &SplatGrad,
    prim: &crate::scene::GaussianPrimitive,
    camera: &Camera,
    median_depth: f64,
    out: &mut PrimitiveGrad,
) -> Result<()> {
    out.color += Vec3::new(sg.color[0], sg.color[1], sg.color[2]);
    for (a, b) in out.sem_compressed.iter_mut().zip(&sg.features) {
        *a += b;
    }

    // power = -½ dᵀ Q d, Q = Σ'⁻¹  ⇒  dL/dΣ' = ½ Q (Σ g d dᵀ) Q
    let d_cov2d = s.conic * sg.power_outer * s.conic * 0.5;
    let w = &camera.rotation;
    let tw: Matrix2x3<f64> = s.jacobian * w;
    let cov3 = crate::gaussian::build_covariance(&prim.scale, &prim.rotation).matrix;
    let d_cov3: Matrix3<f64> = tw.transpose() * d_cov2d * tw;
    let d_tw: Matrix2x3<f64> = (d_cov2d + d_cov2d.transpose()) * tw * cov3;
    let d_j: Matrix2x3<f64> = d_tw * w.transpose();

    let t = s.cam_point;
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = Vec3::zeros();
    // mean2d = (fx x/z + cx, fy y/z + cy)
    d_t.x += fx * iz * sg.mean2d.x;
    d_t.y += fy * iz * sg.mean2d.y;
    d_t.z += -fx * t.x * iz2 * sg.mean2d.x - fy * t.y * iz2 * sg.mean2d.y;
    // J = [[fx/z, 0, -fx x/z²], [0, fy/z, -fy y/z²]]
    d_t.x += -fx * iz2 * d_j[(0, 2)];
    d_t.y += -fy * iz2 * d_j[(1, 2)];
    d_t.z += -fx * iz2 * d_j[(0, 0)] - fy * iz2 * d_j[(1, 1)]
        + 2.0 * fx * t.x * iz3 * d_j[(0, 2)]
        + 2.0 * fy * t.y * iz3 * d_j[(1, 2)];
    d_t.z += sg.depth;
    out.center += w.transpose() * d_t;

    let (d_scale, d_rot) = covariance_vjp(&prim.scale, &prim.rotation, &d_cov3);
    let raw = activation_vjp(
        prim.opacity_raw,
        &prim.scale_raw,
        &prim.rotation_raw,
        median_depth,
        sg.opacity,
        &d_scale,
        &d_rot,
    )?;
    out.opacity_raw += raw.opacity_raw;
    out.scale_raw += raw.scale_raw;
    out.rotation_raw += raw.rotation_raw;
    Ok(())
}
