//! Image, depth and segmentation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scene::ImageBuffer;

/// Depth inlier threshold on `max(pred/gt, gt/pred)`.
pub const DEPTH_INLIER_THRESHOLD: f64 = 1.03;
/// Pixels with rendered alpha at or below this are excluded from depth metrics.
pub const DEPTH_VALID_ALPHA: f64 = 0.5;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for data in `[0, 1]`; `+∞` for identical images.
pub fn psnr(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    pred.check_shape(gt, "psnr")?;
    let n = pred.data.len();
    if n == 0 {
        return Err(Error::InvalidConfig("psnr of an empty image".into()));
    }
    let mse = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a single-channel plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let ow = width + 1 - k;
    let oh = height + 1 - k;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over valid window
/// positions and then over channels.
pub fn ssim(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    pred.check_shape(gt, "ssim")?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(Error::InvalidConfig(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            pred.width, pred.height
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (w, h) = (pred.width, pred.height);
    let mut total = 0.0;
    for c in 0..pred.channels {
        let x = pred.channel(c).data;
        let y = gt.channel(c).data;
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, _, _) = filter_valid(&x, w, h, &taps);
        let (my, _, _) = filter_valid(&y, w, h, &taps);
        let (sxx, _, _) = filter_valid(&xx, w, h, &taps);
        let (syy, _, _) = filter_valid(&yy, w, h, &taps);
        let (sxy, _, _) = filter_valid(&xy, w, h, &taps);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / pred.channels as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    /// Mean absolute relative error, percent.
    pub rel: f64,
    /// Inlier ratio at [`DEPTH_INLIER_THRESHOLD`], percent.
    pub tau: f64,
}

/// Rendered alpha above [`DEPTH_VALID_ALPHA`] and finite positive ground truth.
pub fn depth_valid_mask(alpha: &ImageBuffer, gt: &ImageBuffer) -> Vec<bool> {
    alpha
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&a, &g)| a > DEPTH_VALID_ALPHA && g.is_finite() && g > 0.0)
        .collect()
}

pub fn depth_metrics(pred: &ImageBuffer, gt: &ImageBuffer, valid: &[bool]) -> Result<DepthMetrics> {
    pred.check_shape(gt, "depth_metrics")?;
    if pred.channels != 1 || valid.len() != pred.data.len() {
        return Err(Error::mismatch("depth valid mask", pred.data.len(), valid.len()));
    }
    let mut n = 0usize;
    let mut rel = 0.0;
    let mut inliers = 0usize;
    for ((&p, &g), &ok) in pred.data.iter().zip(&gt.data).zip(valid) {
        if !ok {
            continue;
        }
        if !(g > 0.0) {
            return Err(Error::InvalidConfig("ground-truth depth must be > 0 on valid pixels".into()));
        }
        n += 1;
        rel += (p - g).abs() / g;
        if (p / g).max(g / p) < DEPTH_INLIER_THRESHOLD {
            inliers += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidConfig("no valid depth pixels".into()));
    }
    Ok(DepthMetrics {
        rel: 100.0 * rel / n as f64,
        tau: 100.0 * inliers as f64 / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub miou: f64,
    pub acc: f64,
    /// IoU per class; `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

/// mIoU over classes present in the ground truth, and pixel accuracy.
///
/// Labels `>= num_classes` are void. Pixels with void ground truth are
/// excluded; a void prediction on a labelled pixel counts as a miss.
pub fn seg_metrics(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::mismatch("seg_metrics labels", gt.len(), pred.len()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut valid = 0usize;
    let mut correct = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if g >= num_classes {
            continue;
        }
        valid += 1;
        if p == g {
            tp[g] += 1;
            correct += 1;
        } else {
            fn_[g] += 1;
            if p < num_classes {
                fp[p] += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::InvalidConfig("no labelled ground-truth pixels".into()));
    }
    let per_class_iou: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = (0..num_classes)
        .filter(|&c| tp[c] + fn_[c] > 0)
        .map(|c| per_class_iou[c].unwrap_or(0.0))
        .collect();
    Ok(SegMetrics {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        acc: correct as f64 / valid as f64,
        per_class_iou,
    })
}

/// Labels stored as floats in a single-channel image.
pub fn labels_from_image(img: &ImageBuffer) -> Vec<usize> {
    img.data.iter().map(|&v| v.max(0.0).round() as usize).collect()
}

/// Evaluation summary written by the `eval` command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(
        serialize_with = "ser_psnr",
        deserialize_with = "de_psnr",
        skip_serializing_if = "Option::is_none",
        default
    )]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc: Option<f64>,
    #[serde(default)]
    pub per_class_iou: BTreeMap<String, f64>,
}

fn ser_psnr<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Psnr {
        Num(f64),
        Str(String),
    }
    match Option::<Psnr>::deserialize(d)? {
        None => Ok(None),
        Some(Psnr::Num(x)) => Ok(Some(x)),
        Some(Psnr::Str(s)) if s == "inf" => Ok(Some(f64::INFINITY)),
        Some(Psnr::Str(s)) => Err(serde::de::Error::custom(format!("bad psnr value {s:?}"))),
    }
}

impl MetricReport {
    /// Checks every populated field against its range.
    pub fn in_range(&self) -> bool {
        let within = |v: Option<f64>, lo: f64, hi: f64| v.is_none_or(|x| x >= lo && x <= hi);
        self.psnr.is_none_or(|p| !p.is_nan())
            && within(self.ssim, -1.0, 1.0)
            && self.rel.is_none_or(|r| r >= 0.0)
            && within(self.tau, 0.0, 100.0)
            && within(self.miou, 0.0, 1.0)
            && within(self.acc, 0.0, 1.0)
            && self.per_class_iou.values().all(|v| (0.0..=1.0).contains(v))
    }
}
