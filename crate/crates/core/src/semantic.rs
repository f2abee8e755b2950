//! Affine feature codec, text prototypes, and open-vocabulary segmentation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grad::CodecGrad;
use crate::scene::{GaussianScene, ImageBuffer};

/// Feature vectors with squared norm below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Encoder `d -> d_c` and decoder `d_c -> d`, each a single affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCodec {
    /// `d_c × d`.
    pub enc_weight: DMatrix<f64>,
    pub enc_bias: DVector<f64>,
    /// `d × d_c`.
    pub dec_weight: DMatrix<f64>,
    pub dec_bias: DVector<f64>,
}

impl FeatureCodec {
    pub fn new(
        enc_weight: DMatrix<f64>,
        enc_bias: DVector<f64>,
        dec_weight: DMatrix<f64>,
        dec_bias: DVector<f64>,
    ) -> Result<Self> {
        let codec = Self {
            enc_weight,
            enc_bias,
            dec_weight,
            dec_bias,
        };
        codec.check()?;
        Ok(codec)
    }

    pub fn zeros(sem_dim: usize, compressed_dim: usize) -> Self {
        Self {
            enc_weight: DMatrix::zeros(compressed_dim, sem_dim),
            enc_bias: DVector::zeros(compressed_dim),
            dec_weight: DMatrix::zeros(sem_dim, compressed_dim),
            dec_bias: DVector::zeros(sem_dim),
        }
    }

    /// Identity codec for `d_c = d`.
    pub fn identity(dim: usize) -> Self {
        Self {
            enc_weight: DMatrix::identity(dim, dim),
            enc_bias: DVector::zeros(dim),
            dec_weight: DMatrix::identity(dim, dim),
            dec_bias: DVector::zeros(dim),
        }
    }

    pub fn sem_dim(&self) -> usize {
        self.enc_weight.ncols()
    }

    pub fn compressed_dim(&self) -> usize {
        self.enc_weight.nrows()
    }

    fn check(&self) -> Result<()> {
        let (dc, d) = self.enc_weight.shape();
        if self.enc_bias.len() != dc
            || self.dec_weight.shape() != (d, dc)
            || self.dec_bias.len() != d
        {
            return Err(Error::mismatch(
                "feature codec",
                format!("enc {dc}x{d}+{dc}, dec {d}x{dc}+{d}"),
                format!(
                    "enc {:?}+{}, dec {:?}+{}",
                    self.enc_weight.shape(),
                    self.enc_bias.len(),
                    self.dec_weight.shape(),
                    self.dec_bias.len()
                ),
            ));
        }
        if dc > d {
            return Err(Error::InvalidConfig(format!(
                "compressed dim {dc} exceeds semantic dim {d}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, feature: &[f64]) -> Vec<f64> {
        affine(&self.enc_weight, &self.enc_bias, feature)
    }

    pub fn decode(&self, compressed: &[f64]) -> Vec<f64> {
        affine(&self.dec_weight, &self.dec_bias, compressed)
    }
}

fn affine(w: &DMatrix<f64>, b: &DVector<f64>, x: &[f64]) -> Vec<f64> {
    let y = w * DVector::from_column_slice(x) + b;
    y.as_slice().to_vec()
}

/// Category prototypes in the decoded feature space, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl PrototypeSet {
    pub fn new(prototypes: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if prototypes.nrows() == 0 {
            return Err(Error::InvalidConfig("prototype set is empty".into()));
        }
        if labels.len() != prototypes.nrows() {
            return Err(Error::mismatch("prototype labels", prototypes.nrows(), labels.len()));
        }
        if let Some(r) = (0..prototypes.nrows()).find(|&r| prototypes.row(r).norm_squared() < ZERO_NORM) {
            return Err(Error::InvalidConfig(format!("prototype {r} has zero norm")));
        }
        Ok(Self { prototypes, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    /// Label index assigned to pixels whose feature is zero.
    pub fn void_label(&self) -> usize {
        self.num_classes()
    }
}

/// Replaces every primitive's compressed feature with `enc · f + b`.
pub fn encode_features(scene: &GaussianScene, codec: &FeatureCodec) -> Result<GaussianScene> {
    if codec.sem_dim() != scene.sem_dim || codec.compressed_dim() != scene.compressed_dim {
        return Err(Error::mismatch(
            "encode_features",
            format!("{}->{}", scene.sem_dim, scene.compressed_dim),
            format!("{}->{}", codec.sem_dim(), codec.compressed_dim()),
        ));
    }
    let mut out = scene.clone();
    for p in &mut out.primitives {
        if p.sem_feature.len() != scene.sem_dim {
            return Err(Error::mismatch("semantic feature", scene.sem_dim, p.sem_feature.len()));
        }
        p.sem_compressed = Some(codec.encode(&p.sem_feature));
    }
    Ok(out)
}

/// Per-pixel `dec · F̂ + b`.
pub fn decode_features(rendered: &ImageBuffer, codec: &FeatureCodec) -> Result<ImageBuffer> {
    if rendered.channels != codec.compressed_dim() {
        return Err(Error::mismatch(
            "decode_features channels",
            codec.compressed_dim(),
            rendered.channels,
        ));
    }
    let d = codec.sem_dim();
    let data: Vec<f64> = (0..rendered.pixel_count())
        .into_par_iter()
        .flat_map_iter(|i| codec.decode(rendered.pixel(i)))
        .collect();
    ImageBuffer::from_data(rendered.width, rendered.height, d, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentOptions {
    pub temperature: f64,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    /// Softmax over cosine similarities, `N_C` channels.
    pub logits: ImageBuffer,
    /// Class index per pixel, `N_C` for void.
    pub labels: ImageBuffer,
}

/// Segments a decoded feature map against the prototypes by cosine similarity.
pub fn segment(decoded: &ImageBuffer, protos: &PrototypeSet) -> Result<Segmentation> {
    segment_with(decoded, protos, SegmentOptions::default())
}

pub fn segment_with(
    decoded: &ImageBuffer,
    protos: &PrototypeSet,
    opts: SegmentOptions,
) -> Result<Segmentation> {
    if decoded.channels != protos.dim() {
        return Err(Error::mismatch("segment channels", protos.dim(), decoded.channels));
    }
    let nc = protos.num_classes();
    let unit: Vec<DVector<f64>> = (0..nc)
        .map(|r| protos.prototypes.row(r).transpose().normalize())
        .collect();
    let per_pixel: Vec<(Vec<f64>, usize)> = (0..decoded.pixel_count())
        .into_par_iter()
        .map(|i| {
            let f = decoded.pixel(i);
            let norm2: f64 = f.iter().map(|v| v * v).sum();
            if norm2 < ZERO_NORM {
                return (vec![1.0 / nc as f64; nc], nc);
            }
            let norm = norm2.sqrt();
            let sims: Vec<f64> = unit
                .iter()
                .map(|p| p.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / norm)
                .collect();
            let label = argmax(&sims);
            (softmax(&sims, opts.temperature), label)
        })
        .collect();
    let mut logits = Vec::with_capacity(decoded.pixel_count() * nc);
    let mut labels = Vec::with_capacity(decoded.pixel_count());
    for (l, lab) in per_pixel {
        logits.extend(l);
        labels.push(lab as f64);
    }
    Ok(Segmentation {
        logits: ImageBuffer::from_data(decoded.width, decoded.height, nc, logits)?,
        labels: ImageBuffer::from_data(decoded.width, decoded.height, 1, labels)?,
    })
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(v: &[f64], temperature: f64) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Gradients through the decoder: given `dL/dF̂'` on the decoded map and the
/// rendered map `F̂`, returns `dL/dF̂` and accumulates decoder parameter
/// gradients into `grad`.
pub fn decoder_backward(
    rendered: &ImageBuffer,
    upstream: &ImageBuffer,
    codec: &FeatureCodec,
    grad: &mut CodecGrad,
) -> Result<ImageBuffer> {
    let (d, dc) = (codec.sem_dim(), codec.compressed_dim());
    if rendered.channels != dc {
        return Err(Error::mismatch("decoder_backward input", dc, rendered.channels));
    }
    if upstream.channels != d
        || upstream.width != rendered.width
        || upstream.height != rendered.height
    {
        return Err(Error::mismatch(
            "decoder_backward upstream",
            format!("{}x{}x{d}", rendered.width, rendered.height),
            upstream.shape_str(),
        ));
    }
    let n = rendered.pixel_count();
    let x = DMatrix::from_column_slice(dc, n, &rendered.data);
    let g = DMatrix::from_column_slice(d, n, &upstream.data);
    grad.dec_weight += &g * x.transpose();
    grad.dec_bias += g.column_sum();
    let dx = codec.dec_weight.transpose() * g;
    ImageBuffer::from_data(rendered.width, rendered.height, dc, dx.as_slice().to_vec())
}

/// Gradients through the encoder: given `dL/d f̂_j` for every primitive,
/// returns `dL/d f_j` and accumulates encoder parameter gradients.
pub fn encoder_backward(
    features: &[&[f64]],
    upstream: &[&[f64]],
    codec: &FeatureCodec,
    grad: &mut CodecGrad,
) -> Result<Vec<Vec<f64>>> {
    let (d, dc) = (codec.sem_dim(), codec.compressed_dim());
    if features.len() != upstream.len() {
        return Err(Error::mismatch("encoder_backward count", features.len(), upstream.len()));
    }
    let mut out = Vec::with_capacity(features.len());
    for (f, g) in features.iter().zip(upstream) {
        if f.len() != d || g.len() != dc {
            return Err(Error::mismatch(
                "encoder_backward dims",
                format!("{d}/{dc}"),
                format!("{}/{}", f.len(), g.len()),
            ));
        }
        let fv = DVector::from_column_slice(f);
        let gv = DVector::from_column_slice(g);
        grad.enc_weight += &gv * fv.transpose();
        grad.enc_bias += &gv;
        out.push((codec.enc_weight.transpose() * gv).as_slice().to_vec());
    }
    Ok(out)
}
