use rayon::prelude::*;

use super::project::{project_gaussian, Splat2D};
use super::{ALPHA_CLAMP, ALPHA_SKIP, SUPPORT_SIGMA, TILE_SIZE, TRANSMITTANCE_STOP};
use crate::error::{Error, Result};
use crate::gaussian::build_covariance;
use crate::scene::{Camera, GaussianScene, ImageBuffer};

const MIN_POWER: f64 = -0.5 * SUPPORT_SIGMA * SUPPORT_SIGMA;

/// Rendered buffers for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    pub features: ImageBuffer,
    pub depth: ImageBuffer,
    pub alpha: ImageBuffer,
    pub stats: RenderStats,
}

/// Counts of the discrete compositing decisions taken during a render.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub contributions: usize,
    pub clamped: usize,
    pub terminated_pixels: usize,
}

impl RenderStats {
    fn merge(self, o: RenderStats) -> RenderStats {
        RenderStats {
            contributions: self.contributions + o.contributions,
            clamped: self.clamped + o.clamped,
            terminated_pixels: self.terminated_pixels + o.terminated_pixels,
        }
    }
}

/// Depth-sorted splats binned into tiles.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    /// Visible splats in front-to-back order.
    pub splats: Vec<Splat2D>,
    /// Per tile, indices into `splats` in depth order.
    pub tiles: Vec<Vec<usize>>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
}

impl PreparedScene {
    pub(crate) fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let x1 = (x0 + TILE_SIZE).min(self.width);
        let y1 = (y0 + TILE_SIZE).min(self.height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// Projects, depth-sorts and bins every primitive of `scene`.
pub fn prepare(scene: &GaussianScene, camera: &Camera) -> PreparedScene {
    let mut splats: Vec<Splat2D> = scene
        .primitives
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let cov = build_covariance(&p.scale, &p.rotation);
            project_gaussian(p, &cov, camera, i)
        })
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.source_index.cmp(&b.source_index))
    });

    let (width, height) = (camera.width, camera.height);
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let (x0, y0, x1, y1) = s.bounds;
        if x1 < 0 || y1 < 0 || x0 >= width as i64 || y0 >= height as i64 {
            continue;
        }
        let tx0 = (x0.max(0) as usize) / TILE_SIZE;
        let ty0 = (y0.max(0) as usize) / TILE_SIZE;
        let tx1 = (x1.min(width as i64 - 1) as usize) / TILE_SIZE;
        let ty1 = (y1.min(height as i64 - 1) as usize) / TILE_SIZE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(k);
            }
        }
    }
    PreparedScene {
        splats,
        tiles,
        tiles_x,
        tiles_y,
        width,
        height,
    }
}

/// One composited splat at one pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    pub splat: usize,
    pub kernel: f64,
    pub alpha: f64,
    pub clamped: bool,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
    pub dx: f64,
    pub dy: f64,
}

/// Walks `order` front to back at pixel `(x, y)`, calling `visit` for each
/// composited splat. Returns the final transmittance and whether compositing
/// stopped early.
#[inline]
pub(crate) fn walk_pixel(
    splats: &[Splat2D],
    order: &[usize],
    x: usize,
    y: usize,
    mut visit: impl FnMut(&Contribution),
) -> (f64, bool) {
    let (px, py) = (x as f64, y as f64);
    let mut t = 1.0;
    for &k in order {
        let s = &splats[k];
        let (power, dx, dy) = s.power(px, py);
        if !(MIN_POWER..=0.0).contains(&power) {
            continue;
        }
        let kernel = power.exp();
        let raw = s.opacity * kernel;
        let clamped = raw > ALPHA_CLAMP;
        let alpha = if clamped { ALPHA_CLAMP } else { raw };
        if alpha < ALPHA_SKIP {
            continue;
        }
        let next_t = t * (1.0 - alpha);
        if next_t < TRANSMITTANCE_STOP {
            return (t, true);
        }
        visit(&Contribution {
            splat: k,
            kernel,
            alpha,
            clamped,
            transmittance: t,
            dx,
            dy,
        });
        t = next_t;
    }
    (t, false)
}

struct TileResult {
    pixels: Vec<(usize, usize)>,
    color: Vec<f64>,
    features: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    stats: RenderStats,
}

/// Renders color, compressed features, depth and accumulated alpha.
///
/// Parallel over tiles on the current rayon pool; output does not depend on
/// the number of threads.
pub fn render(scene: &GaussianScene, camera: &Camera) -> Result<RenderOutput> {
    if !scene.is_compressed() {
        return Err(Error::FeaturesNotCompressed);
    }
    let dc = scene.compressed_dim;
    let prepared = prepare(scene, camera);
    let splats = &prepared.splats;
    let colors: Vec<[f64; 3]> = splats
        .iter()
        .map(|s| {
            let c = &scene.primitives[s.source_index].color;
            [c.x, c.y, c.z]
        })
        .collect();
    let features: Vec<&[f64]> = splats
        .iter()
        .map(|s| {
            scene.primitives[s.source_index]
                .sem_compressed
                .as_deref()
                .unwrap_or_default()
        })
        .collect();

    let tile_results: Vec<TileResult> = (0..prepared.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let order = &prepared.tiles[tile];
            let pixels: Vec<(usize, usize)> = prepared.tile_pixels(tile).collect();
            let n = pixels.len();
            let mut out = TileResult {
                color: vec![0.0; n * 3],
                features: vec![0.0; n * dc],
                depth: vec![0.0; n],
                alpha: vec![0.0; n],
                stats: RenderStats::default(),
                pixels,
            };
            for (i, &(x, y)) in out.pixels.iter().enumerate() {
                let color = &mut out.color[i * 3..i * 3 + 3];
                let feat = &mut out.features[i * dc..(i + 1) * dc];
                let mut depth = 0.0;
                let stats = &mut out.stats;
                let (t, terminated) = walk_pixel(splats, order, x, y, |c| {
                    let w = c.alpha * c.transmittance;
                    for (o, v) in color.iter_mut().zip(&colors[c.splat]) {
                        *o += w * v;
                    }
                    for (o, v) in feat.iter_mut().zip(features[c.splat]) {
                        *o += w * v;
                    }
                    depth += w * splats[c.splat].depth;
                    stats.contributions += 1;
                    stats.clamped += c.clamped as usize;
                });
                stats.terminated_pixels += terminated as usize;
                out.depth[i] = depth;
                out.alpha[i] = 1.0 - t;
            }
            out
        })
        .collect();

    let (w, h) = (camera.width, camera.height);
    let mut output = RenderOutput {
        color: ImageBuffer::zeros(w, h, 3),
        features: ImageBuffer::zeros(w, h, dc),
        depth: ImageBuffer::zeros(w, h, 1),
        alpha: ImageBuffer::zeros(w, h, 1),
        stats: RenderStats::default(),
    };
    for tr in tile_results {
        for (i, &(x, y)) in tr.pixels.iter().enumerate() {
            let p = y * w + x;
            output.color.pixel_mut(p).copy_from_slice(&tr.color[i * 3..i * 3 + 3]);
            output
                .features
                .pixel_mut(p)
                .copy_from_slice(&tr.features[i * dc..(i + 1) * dc]);
            output.depth.data[p] = tr.depth[i];
            output.alpha.data[p] = tr.alpha[i];
        }
        output.stats = output.stats.merge(tr.stats);
    }
    Ok(output)
}
