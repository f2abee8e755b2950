//! Gradient containers shared by the rasterizer, codec and fitting loop.

use nalgebra::{DMatrix, DVector};

use crate::scene::{Quat, Vec3};

/// Gradient of a scalar loss with respect to one primitive's trainable fields.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrad {
    pub center: Vec3,
    pub opacity_raw: f64,
    pub color: Vec3,
    pub scale_raw: Vec3,
    pub rotation_raw: Quat,
    pub sem_feature: Vec<f64>,
    pub sem_compressed: Vec<f64>,
}

impl PrimitiveGrad {
    pub fn zeros(sem_dim: usize, compressed_dim: usize) -> Self {
        Self {
            center: Vec3::zeros(),
            opacity_raw: 0.0,
            color: Vec3::zeros(),
            scale_raw: Vec3::zeros(),
            rotation_raw: Quat::zeros(),
            sem_feature: vec![0.0; sem_dim],
            sem_compressed: vec![0.0; compressed_dim],
        }
    }

    fn add_scaled(&mut self, other: &PrimitiveGrad, w: f64) {
        self.center += other.center * w;
        self.opacity_raw += other.opacity_raw * w;
        self.color += other.color * w;
        self.scale_raw += other.scale_raw * w;
        self.rotation_raw += other.rotation_raw * w;
        axpy(&mut self.sem_feature, &other.sem_feature, w);
        axpy(&mut self.sem_compressed, &other.sem_compressed, w);
    }

    pub fn max_abs(&self) -> f64 {
        self.center
            .iter()
            .chain(std::iter::once(&self.opacity_raw))
            .chain(self.color.iter())
            .chain(self.scale_raw.iter())
            .chain(self.rotation_raw.iter())
            .chain(self.sem_feature.iter())
            .chain(self.sem_compressed.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Gradient with respect to the affine codec parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecGrad {
    pub enc_weight: DMatrix<f64>,
    pub enc_bias: DVector<f64>,
    pub dec_weight: DMatrix<f64>,
    pub dec_bias: DVector<f64>,
}

impl CodecGrad {
    pub fn zeros(sem_dim: usize, compressed_dim: usize) -> Self {
        Self {
            enc_weight: DMatrix::zeros(compressed_dim, sem_dim),
            enc_bias: DVector::zeros(compressed_dim),
            dec_weight: DMatrix::zeros(sem_dim, compressed_dim),
            dec_bias: DVector::zeros(sem_dim),
        }
    }

    pub fn add_scaled(&mut self, other: &CodecGrad, w: f64) {
        self.enc_weight += &other.enc_weight * w;
        self.enc_bias += &other.enc_bias * w;
        self.dec_weight += &other.dec_weight * w;
        self.dec_bias += &other.dec_bias * w;
    }
}

/// Per-parameter gradients for a whole scene and (optionally) its codec.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub primitives: Vec<PrimitiveGrad>,
    pub codec: Option<CodecGrad>,
}

impl GradientBundle {
    pub fn zeros(count: usize, sem_dim: usize, compressed_dim: usize) -> Self {
        Self {
            primitives: vec![PrimitiveGrad::zeros(sem_dim, compressed_dim); count],
            codec: None,
        }
    }

    /// `self += w * other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &GradientBundle, w: f64) {
        assert_eq!(self.primitives.len(), other.primitives.len());
        for (a, b) in self.primitives.iter_mut().zip(&other.primitives) {
            a.add_scaled(b, w);
        }
        match (&mut self.codec, &other.codec) {
            (Some(a), Some(b)) => a.add_scaled(b, w),
            (None, Some(b)) => {
                let mut c = CodecGrad::zeros(b.dec_weight.nrows(), b.enc_weight.nrows());
                c.add_scaled(b, w);
                self.codec = Some(c);
            }
            _ => {}
        }
    }

    pub fn max_abs(&self) -> f64 {
        let prim = self.primitives.iter().map(PrimitiveGrad::max_abs).fold(0.0, f64::max);
        let codec = self.codec.as_ref().map_or(0.0, |c| {
            c.enc_weight
                .iter()
                .chain(c.enc_bias.iter())
                .chain(c.dec_weight.iter())
                .chain(c.dec_bias.iter())
                .fold(0.0f64, |m, v| m.max(v.abs()))
        });
        prim.max(codec)
    }
}

pub(crate) fn axpy(y: &mut [f64], x: &[f64], w: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (a, b) in y.iter_mut().zip(x) {
        *a += w * b;
    }
}
