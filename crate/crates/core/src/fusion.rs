//! Forward-only multi-view token fusion: intrinsic embedding, patch
//! tokenization, a shared camera token per view, and alternating intra-frame /
//! cross-frame attention blocks.
//!
//! Attention sums run over keys in a canonical order (lexicographic on the
//! key and value vectors of each head), so reordering views reorders the
//! output bit-for-bit.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, ImageBuffer};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub layers: usize,
    /// Token width.
    pub d_t: usize,
    pub heads: usize,
    pub patch: usize,
    /// Intrinsic embedding channels.
    pub embed_channels: usize,
    pub mlp_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_t: 32,
            heads: 4,
            patch: 4,
            embed_channels: 4,
            mlp_hidden: 64,
        }
    }
}

impl FusionConfig {
    /// Full-size layout: 24 alternating layers over 16×16 patches.
    pub fn full_scale() -> Self {
        Self {
            layers: 24,
            d_t: 1024,
            heads: 16,
            patch: 16,
            embed_channels: 4,
            mlp_hidden: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidConfig("fusion needs at least one layer".into()));
        }
        if self.heads == 0 || self.d_t == 0 || !self.d_t.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "token width {} not divisible by {} heads",
                self.d_t, self.heads
            )));
        }
        if self.patch == 0 || self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig("patch and mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Whether a layer attends within each view or across all views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionScope {
    IntraFrame,
    CrossFrame,
}

impl AttentionScope {
    /// Layers alternate starting with intra-frame.
    pub fn of_layer(index: usize) -> Self {
        if index.is_multiple_of(2) {
            Self::IntraFrame
        } else {
            Self::CrossFrame
        }
    }
}

/// Per view: `P` patch tokens followed by the camera token at index `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub views: Vec<Vec<Vec<f64>>>,
    pub d_t: usize,
}

impl TokenSet {
    pub fn new(views: Vec<Vec<Vec<f64>>>, d_t: usize) -> Result<Self> {
        let set = Self { views, d_t };
        set.validate()?;
        Ok(set)
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Patch tokens per view, excluding the camera token.
    pub fn patches(&self) -> usize {
        self.views.first().map_or(0, |v| v.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.views.first() else {
            return Err(Error::InvalidConfig("token set has no views".into()));
        };
        if first.is_empty() {
            return Err(Error::InvalidConfig("view without camera token".into()));
        }
        for (v, view) in self.views.iter().enumerate() {
            if view.len() != first.len() {
                return Err(Error::mismatch(
                    "tokens per view",
                    first.len(),
                    format!("{} (view {v})", view.len()),
                ));
            }
            for (t, tok) in view.iter().enumerate() {
                if tok.len() != self.d_t {
                    return Err(Error::mismatch("token width", self.d_t, tok.len()));
                }
                if tok.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("token {t} of view {v}")));
                }
            }
        }
        Ok(())
    }
}

/// `(fx/w, fy/h, cx/w, cy/h)`.
pub fn intrinsic_vector(camera: &Camera) -> [f64; 4] {
    let (w, h) = (camera.width as f64, camera.height as f64);
    [camera.fx / w, camera.fy / h, camera.cx / w, camera.cy / h]
}

/// Projects the normalized intrinsics by `projection` (`k × 4`) and broadcasts
/// the result to every pixel of a `width × height` map.
pub fn intrinsic_embed(
    camera: &Camera,
    projection: &DMatrix<f64>,
    width: usize,
    height: usize,
) -> Result<ImageBuffer> {
    camera.validate()?;
    if projection.ncols() != 4 {
        return Err(Error::mismatch("intrinsic projection columns", 4, projection.ncols()));
    }
    let v = intrinsic_vector(camera);
    let k = projection.nrows();
    let emb: Vec<f64> = (0..k)
        .map(|r| (0..4).fold(0.0, |acc, c| acc + projection[(r, c)] * v[c]))
        .collect();
    let mut out = ImageBuffer::zeros(width, height, k);
    for px in out.data.chunks_exact_mut(k.max(1)) {
        px.copy_from_slice(&emb[..px.len()]);
    }
    Ok(out)
}

/// Channel-wise concatenation of two maps of equal size.
pub fn concat_channels(a: &ImageBuffer, b: &ImageBuffer) -> Result<ImageBuffer> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::mismatch("concat size", a.shape_str(), b.shape_str()));
    }
    let c = a.channels + b.channels;
    let mut data = Vec::with_capacity(a.pixel_count() * c);
    for i in 0..a.pixel_count() {
        data.extend_from_slice(a.pixel(i));
        data.extend_from_slice(b.pixel(i));
    }
    Ok(ImageBuffer {
        width: a.width,
        height: a.height,
        channels: c,
        data,
    })
}

/// Splits `image` into non-overlapping `patch × patch` tiles in row-major
/// order, flattens each as `(py, px, channel)`, and projects it by
/// `projection` (`d_t × patch²·C`).
pub fn tokenize(image: &ImageBuffer, patch: usize, projection: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    if patch == 0 || !image.width.is_multiple_of(patch) || !image.height.is_multiple_of(patch) {
        return Err(Error::InvalidConfig(format!(
            "image {} not divisible into {patch}-pixel patches",
            image.shape_str()
        )));
    }
    let flat = patch * patch * image.channels;
    if projection.ncols() != flat {
        return Err(Error::mismatch("patch projection columns", flat, projection.ncols()));
    }
    let (nx, ny) = (image.width / patch, image.height / patch);
    let mut tokens = Vec::with_capacity(nx * ny);
    let mut buf = Vec::with_capacity(flat);
    for ty in 0..ny {
        for tx in 0..nx {
            buf.clear();
            for py in 0..patch {
                for px in 0..patch {
                    buf.extend_from_slice(image.pixel((ty * patch + py) * image.width + tx * patch + px));
                }
            }
            tokens.push(matvec(projection, &buf));
        }
    }
    Ok(tokens)
}

fn matvec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| x.iter().enumerate().fold(0.0, |acc, (c, &v)| acc + m[(r, c)] * v))
        .collect()
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, mean: f64, scale: f64) -> Vec<f64> {
    (0..n).map(|_| mean + scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Pre-norm attention + MLP block with residual connections.
#[derive(Clone, Debug)]
pub struct Block {
    pub heads: usize,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: DMatrix<f64>,
    pub b1: Vec<f64>,
    pub w2: DMatrix<f64>,
    pub b2: Vec<f64>,
}

/// Attention probabilities of one block application: `[head][query][key]`,
/// keys in input order.
pub type AttentionProbs = Vec<Vec<Vec<f64>>>;

impl Block {
    fn random(rng: &mut ChaCha8Rng, cfg: &FusionConfig) -> Self {
        let d = cfg.d_t;
        let s = 1.0 / (d as f64).sqrt();
        Self {
            heads: cfg.heads,
            ln1_gamma: normal_vec(rng, d, 1.0, 0.1),
            ln1_beta: normal_vec(rng, d, 0.0, 0.1),
            wq: normal_matrix(rng, d, d, s),
            wk: normal_matrix(rng, d, d, s),
            wv: normal_matrix(rng, d, d, s),
            wo: normal_matrix(rng, d, d, s),
            ln2_gamma: normal_vec(rng, d, 1.0, 0.1),
            ln2_beta: normal_vec(rng, d, 0.0, 0.1),
            w1: normal_matrix(rng, cfg.mlp_hidden, d, s),
            b1: normal_vec(rng, cfg.mlp_hidden, 0.0, 0.1),
            w2: normal_matrix(rng, d, cfg.mlp_hidden, 1.0 / (cfg.mlp_hidden as f64).sqrt()),
            b2: normal_vec(rng, d, 0.0, 0.1),
        }
    }

    /// Self-attention over `tokens` followed by the MLP.
    pub fn forward(&self, tokens: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.forward_traced(tokens).0
    }

    pub fn forward_traced(&self, tokens: &[Vec<f64>]) -> (Vec<Vec<f64>>, AttentionProbs) {
        let d = self.wq.nrows();
        let dh = d / self.heads;
        let normed: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| layer_norm(t, &self.ln1_gamma, &self.ln1_beta))
            .collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|h| matvec(&self.wq, h)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|h| matvec(&self.wk, h)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|h| matvec(&self.wv, h)).collect();
        let scale = 1.0 / (dh as f64).sqrt();

        let per_head: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..self.heads)
            .into_par_iter()
            .map(|head| {
                let r = head * dh..(head + 1) * dh;
                let mut order: Vec<usize> = (0..tokens.len()).collect();
                order.sort_by(|&a, &b| {
                    lexicographic(&k[a][r.clone()], &k[b][r.clone()])
                        .then_with(|| lexicographic(&v[a][r.clone()], &v[b][r.clone()]))
                });
                let mut outs = Vec::with_capacity(tokens.len());
                let mut probs = Vec::with_capacity(tokens.len());
                for qi in &q {
                    let qh = &qi[r.clone()];
                    let mut scores = vec![0.0; tokens.len()];
                    for &j in &order {
                        scores[j] = scale * qh.iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let max = order.iter().map(|&j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for &j in &order {
                        scores[j] = (scores[j] - max).exp();
                        denom += scores[j];
                    }
                    let mut out = vec![0.0; dh];
                    for &j in &order {
                        scores[j] /= denom;
                        for (o, vv) in out.iter_mut().zip(&v[j][r.clone()]) {
                            *o += scores[j] * vv;
                        }
                    }
                    outs.push(out);
                    probs.push(scores);
                }
                (outs, probs)
            })
            .collect();

        let mut result = Vec::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            let concat: Vec<f64> = per_head.iter().flat_map(|(o, _)| o[i].iter().copied()).collect();
            let attn = matvec(&self.wo, &concat);
            let x: Vec<f64> = tok.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let h = layer_norm(&x, &self.ln2_gamma, &self.ln2_beta);
            let hidden: Vec<f64> = matvec(&self.w1, &h)
                .iter()
                .zip(&self.b1)
                .map(|(a, b)| gelu(a + b))
                .collect();
            let mlp = matvec(&self.w2, &hidden);
            result.push(
                x.iter()
                    .zip(mlp.iter().zip(&self.b2))
                    .map(|(a, (m, b))| a + m + b)
                    .collect(),
            );
        }
        (result, per_head.into_iter().map(|(_, p)| p).collect())
    }
}

/// Attention probabilities of one layer: one entry per attention group
/// (each view for intra-frame layers, a single group for cross-frame ones).
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub scope: AttentionScope,
    pub groups: Vec<AttentionProbs>,
}

/// Frozen, seeded parameters for a fixed image size and channel count.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub width: usize,
    pub height: usize,
    pub image_channels: usize,
    /// `k × 4`, shared by all views.
    pub intrinsic_projection: DMatrix<f64>,
    /// `d_t × patch²·(C + k)`.
    pub patch_projection: DMatrix<f64>,
    /// One additive vector per patch position.
    pub positions: Vec<Vec<f64>>,
    pub camera_token: Vec<f64>,
    pub blocks: Vec<Block>,
}

impl FusionModel {
    pub fn new(config: FusionConfig, width: usize, height: usize, image_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let p = config.patch;
        if !width.is_multiple_of(p) || !height.is_multiple_of(p) || width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "{width}x{height} not divisible into {p}-pixel patches"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.embed_channels;
        let flat = p * p * (image_channels + k);
        let d = config.d_t;
        let intrinsic_projection = normal_matrix(&mut rng, k, 4, 1.0);
        let patch_projection = normal_matrix(&mut rng, d, flat, 1.0 / (flat as f64).sqrt());
        let positions = (0..(width / p) * (height / p))
            .map(|_| normal_vec(&mut rng, d, 0.0, 0.1))
            .collect();
        let camera_token = normal_vec(&mut rng, d, 0.0, 1.0);
        let blocks = (0..config.layers).map(|_| Block::random(&mut rng, &config)).collect();
        Ok(Self {
            config,
            width,
            height,
            image_channels,
            intrinsic_projection,
            patch_projection,
            positions,
            camera_token,
            blocks,
        })
    }

    /// Builds the token set for a list of `(image, camera)` views.
    pub fn tokens(&self, views: &[(&ImageBuffer, &Camera)]) -> Result<TokenSet> {
        let mut out = Vec::with_capacity(views.len());
        for (img, cam) in views {
            if (img.width, img.height, img.channels) != (self.width, self.height, self.image_channels) {
                return Err(Error::mismatch(
                    "fusion input",
                    format!("{}x{}x{}", self.width, self.height, self.image_channels),
                    img.shape_str(),
                ));
            }
            let emb = intrinsic_embed(cam, &self.intrinsic_projection, img.width, img.height)?;
            let mut toks = tokenize(&concat_channels(img, &emb)?, self.config.patch, &self.patch_projection)?;
            for (t, pos) in toks.iter_mut().zip(&self.positions) {
                t.iter_mut().zip(pos).for_each(|(a, b)| *a += b);
            }
            toks.push(self.camera_token.clone());
            out.push(toks);
        }
        TokenSet::new(out, self.config.d_t)
    }

    /// Applies layer `index` alone.
    pub fn apply_layer(&self, index: usize, tokens: &TokenSet) -> Result<TokenSet> {
        Ok(self.apply_layer_traced(index, tokens)?.0)
    }

    pub fn apply_layer_traced(&self, index: usize, tokens: &TokenSet) -> Result<(TokenSet, LayerTrace)> {
        tokens.validate()?;
        if tokens.d_t != self.config.d_t {
            return Err(Error::mismatch("token width", self.config.d_t, tokens.d_t));
        }
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::InvalidConfig(format!("layer {index} out of range")))?;
        let scope = AttentionScope::of_layer(index);
        let (views, groups) = match scope {
            AttentionScope::IntraFrame => {
                let res: Vec<_> = tokens.views.par_iter().map(|v| block.forward_traced(v)).collect();
                res.into_iter().unzip()
            }
            AttentionScope::CrossFrame => {
                let per_view = tokens.views[0].len();
                let all: Vec<Vec<f64>> = tokens.views.iter().flatten().cloned().collect();
                let (out, probs) = block.forward_traced(&all);
                let views = out.chunks(per_view).map(|c| c.to_vec()).collect();
                (views, vec![probs])
            }
        };
        Ok((TokenSet { views, d_t: tokens.d_t }, LayerTrace { scope, groups }))
    }

    pub fn fuse(&self, tokens: &TokenSet) -> Result<TokenSet> {
        Ok(self.fuse_traced(tokens)?.0)
    }

    pub fn fuse_traced(&self, tokens: &TokenSet) -> Result<(TokenSet, Vec<LayerTrace>)> {
        let mut cur = tokens.clone();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let (next, trace) = self.apply_layer_traced(i, &cur)?;
            traces.push(trace);
            cur = next;
        }
        Ok((cur, traces))
    }

    /// Every block applied as plain self-attention over one token sequence.
    pub fn self_attention_stack(&self, tokens: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.blocks.iter().fold(tokens.to_vec(), |cur, b| b.forward(&cur))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera(fx: f64, w: usize, h: usize) -> Camera {
        Camera::identity(fx, fx, w as f64 / 2.0, h as f64 / 2.0, w, h)
    }

    #[test]
    fn identity_projection_exposes_normalized_intrinsics() {
        let cam = camera(16.0, 16, 8);
        let emb = intrinsic_embed(&cam, &DMatrix::identity(4, 4), 16, 8).unwrap();
        for i in 0..emb.pixel_count() {
            let p = emb.pixel(i);
            assert_eq!(p[0], 1.0);
            assert_eq!(p[2], 0.5);
        }
        let zero = intrinsic_embed(&cam, &DMatrix::zeros(3, 4), 16, 8).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fx_change_moves_only_fx_components() {
        let a = intrinsic_embed(&camera(16.0, 16, 8), &DMatrix::identity(4, 4), 2, 2).unwrap();
        let mut cam = camera(16.0, 16, 8);
        cam.fx = 20.0;
        let b = intrinsic_embed(&cam, &DMatrix::identity(4, 4), 2, 2).unwrap();
        for i in 0..4 {
            assert_ne!(a.pixel(i)[0], b.pixel(i)[0]);
            assert_eq!(a.pixel(i)[1..], b.pixel(i)[1..]);
        }
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let img = ImageBuffer::filled(8, 8, 2, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = normal_matrix(&mut rng, 5, 4 * 4 * 2, 1.0);
        let toks = tokenize(&img, 4, &proj).unwrap();
        assert_eq!(toks.len(), 4);
        assert!(toks.iter().all(|t| t == &toks[0]));

        let mut img = ImageBuffer::zeros(8, 8, 2);
        img.pixel_mut(8 * 5 + 6)[1] = 1.0;
        let toks = tokenize(&img, 4, &proj).unwrap();
        let nonzero: Vec<usize> = (0..4).filter(|&i| toks[i].iter().any(|&v| v != 0.0)).collect();
        assert_eq!(nonzero, vec![3]);
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate().is_ok());
        assert!(FusionConfig { d_t: 30, heads: 4, ..Default::default() }.validate().is_err());
        assert!(FusionConfig { layers: 0, ..Default::default() }.validate().is_err());
        let full = FusionConfig::full_scale();
        assert_eq!((full.layers, full.patch), (24, 16));
        assert!(full.validate().is_ok());
    }

    #[test]
    fn layers_alternate_starting_intra() {
        assert_eq!(AttentionScope::of_layer(0), AttentionScope::IntraFrame);
        assert_eq!(AttentionScope::of_layer(1), AttentionScope::CrossFrame);
        assert_eq!(AttentionScope::of_layer(4), AttentionScope::IntraFrame);
    }
}
