//! Training objective: photometric, semantic-distillation and geometry terms
//! and their weighted total, each with analytic gradients.

mod geometry;
mod photometric;
mod semantic;

pub use geometry::{
    build_confidence_mask, chamfer_single, loss_geo, umeyama, GeometryLoss, PointGrid,
    SimilarityTransform,
};
pub use photometric::{loss_rgb, PerceptualLoss};
pub use semantic::loss_sem;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradientBundle;
use crate::raster::RenderUpstream;
use crate::scene::ImageBuffer;

const SHIPPED_WEIGHTS: &str = include_str!("../../data/default_weights.json");

/// Loss balancing weights and the geometry confidence ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_lpips: f64,
    pub lambda_sem: f64,
    pub lambda_geo: f64,
    pub conf_ratio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lpips: 0.05,
            lambda_sem: 0.02,
            lambda_geo: 0.005,
            conf_ratio: 0.90,
        }
    }
}

impl LossWeights {
    /// The weights file shipped with the crate.
    pub fn shipped() -> Self {
        serde_json::from_str(SHIPPED_WEIGHTS).expect("shipped weights file is valid")
    }

    pub fn shipped_json() -> &'static str {
        SHIPPED_WEIGHTS
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_lpips, self.lambda_sem, self.lambda_geo];
        if !all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if !(self.conf_ratio > 0.0 && self.conf_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "conf_ratio {} outside (0, 1]",
                self.conf_ratio
            )));
        }
        Ok(())
    }
}

/// Per-view loss values with gradients on each view's input.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewLoss<G> {
    pub value: f64,
    pub per_view: Vec<f64>,
    pub grads: Vec<G>,
}

/// Types whose gradients merge by parameter-wise weighted sums.
pub trait WeightedSum {
    fn add_scaled(&mut self, other: &Self, w: f64);
}

impl WeightedSum for GradientBundle {
    fn add_scaled(&mut self, other: &Self, w: f64) {
        GradientBundle::add_scaled(self, other, w)
    }
}

impl WeightedSum for ImageBuffer {
    fn add_scaled(&mut self, other: &Self, w: f64) {
        assert!(self.same_shape(other));
        crate::grad::axpy(&mut self.data, &other.data, w);
    }
}

impl WeightedSum for RenderUpstream {
    fn add_scaled(&mut self, other: &Self, w: f64) {
        self.color.add_scaled(&other.color, w);
        self.features.add_scaled(&other.features, w);
        self.depth.add_scaled(&other.depth, w);
        self.alpha.add_scaled(&other.alpha, w);
    }
}

impl<G: WeightedSum> WeightedSum for Vec<G> {
    fn add_scaled(&mut self, other: &Self, w: f64) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.iter_mut().zip(other) {
            a.add_scaled(b, w);
        }
    }
}

/// A scalar loss value with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm<G> {
    pub value: f64,
    pub grad: G,
}

/// `L_rgb + λ_sem L_sem + λ_geo L_geo`, merging gradients with the same weights.
pub fn loss_total<G: WeightedSum + Clone>(
    rgb: &LossTerm<G>,
    sem: &LossTerm<G>,
    geo: &LossTerm<G>,
    w: &LossWeights,
) -> LossTerm<G> {
    let mut grad = rgb.grad.clone();
    grad.add_scaled(&sem.grad, w.lambda_sem);
    grad.add_scaled(&geo.grad, w.lambda_geo);
    LossTerm {
        value: total_value(rgb.value, sem.value, geo.value, w),
        grad,
    }
}

pub fn total_value(rgb: f64, sem: f64, geo: f64, w: &LossWeights) -> f64 {
    rgb + w.lambda_sem * sem + w.lambda_geo * geo
}

/// Loss report written by the `losses` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rgb: f64,
    pub l_sem: f64,
    pub l_geo: f64,
    pub l_total: f64,
    pub per_view: Vec<ViewReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub l_rgb: f64,
    pub l_sem: f64,
    pub l_geo: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> LossTerm<ImageBuffer> {
        LossTerm {
            value: v,
            grad: ImageBuffer::filled(1, 1, 1, v),
        }
    }

    #[test]
    fn shipped_weights_match_defaults() {
        assert_eq!(LossWeights::shipped(), LossWeights::default());
    }

    #[test]
    fn total_with_default_weights() {
        let w = LossWeights::default();
        let t = loss_total(&scalar(1.0), &scalar(1.0), &scalar(1.0), &w);
        assert!((t.value - 1.025).abs() < 1e-15);
        assert!((t.grad.data[0] - 1.025).abs() < 1e-15);
        assert_eq!(loss_total(&scalar(0.0), &scalar(0.0), &scalar(0.0), &w).value, 0.0);
        let ablated = LossWeights {
            lambda_sem: 0.0,
            lambda_geo: 0.0,
            ..w
        };
        assert_eq!(
            loss_total(&scalar(0.7), &scalar(3.0), &scalar(9.0), &ablated).value,
            0.7
        );
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            conf_ratio: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            lambda_sem: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partial_weights_file_fills_defaults() {
        let w: LossWeights = serde_json::from_str(r#"{"lambda_sem":0.02,"lambda_geo":0.005}"#).unwrap();
        assert_eq!(w, LossWeights::default());
    }
}
