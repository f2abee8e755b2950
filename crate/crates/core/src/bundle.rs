//! A directory of per-view ground truth or predictions plus the scene, codec
//! and prototypes they came from.
//!
//! `bundle.json` lists every file relative to the bundle directory. Maps are
//! stored as FMAP (f32); in-memory bundles are quantized the same way, so a
//! bundle read back from disk equals the one that was written.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{score_predictions, FitView, ViewPrediction};
use crate::io::{self, quantize_f32};
use crate::losses::{LossReport, LossWeights};
use crate::metrics::{self, MetricReport};
use crate::raster::render;
use crate::scene::{Camera, GaussianScene, ImageBuffer, PredictedPointMap, ReferencePointMap, Vec3};
use crate::semantic::{decode_features, encode_features, segment, FeatureCodec, PrototypeSet};

pub const BUNDLE_MANIFEST: &str = "bundle.json";
pub const BUNDLE_FORMAT: &str = "semsplat-bundle/1";

#[derive(Clone, Debug, PartialEq)]
pub struct BundleView {
    pub camera: Camera,
    /// Three channels.
    pub color: ImageBuffer,
    /// Decoded semantic features, `d` channels.
    pub features: ImageBuffer,
    pub depth: ImageBuffer,
    pub alpha: ImageBuffer,
    /// Three channels of world coordinates.
    pub points: ImageBuffer,
    pub confidence: ImageBuffer,
    /// Class index per pixel, void as `N_C`.
    pub labels: ImageBuffer,
}

impl BundleView {
    pub fn point_list(&self) -> Vec<Vec3> {
        (0..self.points.pixel_count())
            .map(|i| Vec3::from_column_slice(self.points.pixel(i)))
            .collect()
    }

    pub fn reference(&self) -> Result<ReferencePointMap> {
        ReferencePointMap::new(
            self.camera.width,
            self.camera.height,
            self.point_list(),
            self.confidence.data.clone(),
        )
    }

    pub fn prediction(&self) -> Result<ViewPrediction> {
        Ok(ViewPrediction {
            color: self.color.clone(),
            decoded: self.features.clone(),
            points: PredictedPointMap::new(self.camera.width, self.camera.height, self.point_list())?,
        })
    }

    pub fn fit_view(&self) -> Result<FitView> {
        Ok(FitView {
            camera: self.camera.clone(),
            target: self.color.clone(),
            teacher: self.features.clone(),
            reference: self.reference()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub seed: u64,
    /// Scene with features compressed by `codec`.
    pub scene: GaussianScene,
    pub codec: FeatureCodec,
    pub prototypes: PrototypeSet,
    pub views: Vec<BundleView>,
}

impl Bundle {
    pub fn cameras(&self) -> Vec<&Camera> {
        self.views.iter().map(|v| &v.camera).collect()
    }

    pub fn fit_views(&self) -> Result<Vec<FitView>> {
        self.views.iter().map(BundleView::fit_view).collect()
    }
}

/// Renders one view of `scene` and derives every map a bundle stores:
/// decoded features, unprojected depth as points, alpha as confidence, and
/// the segmentation of the decoded features.
pub fn render_view(
    scene: &GaussianScene,
    codec: &FeatureCodec,
    prototypes: &PrototypeSet,
    camera: &Camera,
) -> Result<BundleView> {
    let encoded;
    let scene = if scene.is_compressed() {
        scene
    } else {
        encoded = encode_features(scene, codec)?;
        &encoded
    };
    let out = render(scene, camera)?;
    let features = quantize_f32(&decode_features(&out.features, codec)?);
    let depth = quantize_f32(&out.depth);
    let alpha = quantize_f32(&out.alpha);
    let pts = camera.unproject_depth(&depth)?;
    let points = quantize_f32(&ImageBuffer::from_data(
        camera.width,
        camera.height,
        3,
        pts.iter().flat_map(|p| p.iter().copied()).collect(),
    )?);
    let labels = segment(&features, prototypes)?.labels;
    Ok(BundleView {
        camera: camera.clone(),
        color: quantize_f32(&out.color),
        features,
        depth,
        confidence: alpha.clone(),
        alpha,
        points,
        labels,
    })
}

/// Re-renders every camera of `cameras` from `scene`. Stored compressed
/// features are used as they are; otherwise `codec` encodes them first.
pub fn render_bundle(
    seed: u64,
    scene: &GaussianScene,
    codec: &FeatureCodec,
    prototypes: &PrototypeSet,
    cameras: &[&Camera],
) -> Result<Bundle> {
    let scene = if scene.is_compressed() {
        scene.clone()
    } else {
        encode_features(scene, codec)?
    };
    let views = cameras
        .iter()
        .map(|c| render_view(&scene, codec, prototypes, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Bundle {
        seed,
        scene,
        codec: codec.clone(),
        prototypes: prototypes.clone(),
        views,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub camera: String,
    pub color: String,
    pub preview: String,
    pub features: String,
    pub depth: String,
    pub alpha: String,
    pub points: String,
    pub confidence: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format: String,
    pub seed: u64,
    pub sem_dim: usize,
    pub compressed_dim: usize,
    pub scene: String,
    pub scene_json: String,
    pub codec: String,
    pub prototypes: String,
    pub views: Vec<ViewEntry>,
}

pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    let views = (0..bundle.views.len())
        .map(|i| {
            let f = |name: &str| format!("view_{i:03}/{name}");
            ViewEntry {
                camera: f("camera.json"),
                color: f("color.fmap"),
                preview: f("color.ppm"),
                features: f("features.fmap"),
                depth: f("depth.fmap"),
                alpha: f("alpha.fmap"),
                points: f("points.fmap"),
                confidence: f("confidence.fmap"),
                labels: f("labels.fmap"),
            }
        })
        .collect::<Vec<_>>();
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        seed: bundle.seed,
        sem_dim: bundle.scene.sem_dim,
        compressed_dim: bundle.scene.compressed_dim,
        scene: "scene.sgs".into(),
        scene_json: "scene.json".into(),
        codec: "codec.json".into(),
        prototypes: "prototypes.json".into(),
        views,
    };
    io::write_scene(&dir.join(&manifest.scene), &bundle.scene)?;
    io::write_scene(&dir.join(&manifest.scene_json), &bundle.scene)?;
    io::write_codec(&dir.join(&manifest.codec), &bundle.codec)?;
    io::write_prototypes(&dir.join(&manifest.prototypes), &bundle.prototypes)?;
    for (v, e) in bundle.views.iter().zip(&manifest.views) {
        io::write_camera(&dir.join(&e.camera), &v.camera)?;
        io::write_fmap(&dir.join(&e.color), &v.color)?;
        io::write_ppm(&dir.join(&e.preview), &v.color)?;
        io::write_fmap(&dir.join(&e.features), &v.features)?;
        io::write_fmap(&dir.join(&e.depth), &v.depth)?;
        io::write_fmap(&dir.join(&e.alpha), &v.alpha)?;
        io::write_fmap(&dir.join(&e.points), &v.points)?;
        io::write_fmap(&dir.join(&e.confidence), &v.confidence)?;
        io::write_fmap(&dir.join(&e.labels), &v.labels)?;
    }
    io::write_json(&dir.join(BUNDLE_MANIFEST), &manifest)
}

fn manifest_path(dir: &Path) -> PathBuf {
    if dir.extension().is_some_and(|e| e == "json") {
        dir.to_path_buf()
    } else {
        dir.join(BUNDLE_MANIFEST)
    }
}

/// Reads a bundle from its directory (or its `bundle.json`).
pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let manifest_file = manifest_path(dir);
    let dir = manifest_file.parent().unwrap_or(Path::new("."));
    let m: BundleManifest = io::read_json(&manifest_file)?;
    if m.format != BUNDLE_FORMAT {
        return Err(Error::InvalidConfig(format!(
            "{}: unsupported bundle format {:?}",
            manifest_file.display(),
            m.format
        )));
    }
    let scene = io::read_scene(&dir.join(&m.scene))?;
    let codec = io::read_codec(&dir.join(&m.codec))?;
    let prototypes = io::read_prototypes(&dir.join(&m.prototypes))?;
    let mut views = Vec::with_capacity(m.views.len());
    for e in &m.views {
        let camera = io::read_camera(&dir.join(&e.camera))?;
        let load = |name: &str, channels: usize| -> Result<ImageBuffer> {
            let path = dir.join(name);
            let img = io::read_fmap(&path)?;
            if (img.width, img.height, img.channels) != (camera.width, camera.height, channels) {
                return Err(Error::mismatch(
                    "bundle map",
                    format!("{}x{}x{channels}", camera.width, camera.height),
                    format!("{} ({})", img.shape_str(), path.display()),
                ));
            }
            Ok(img)
        };
        views.push(BundleView {
            color: load(&e.color, 3)?,
            features: load(&e.features, m.sem_dim)?,
            depth: load(&e.depth, 1)?,
            alpha: load(&e.alpha, 1)?,
            points: load(&e.points, 3)?,
            confidence: load(&e.confidence, 1)?,
            labels: load(&e.labels, 1)?,
            camera,
        });
    }
    if views.is_empty() {
        return Err(Error::InvalidConfig(format!("{}: bundle has no views", manifest_file.display())));
    }
    Ok(Bundle {
        seed: m.seed,
        scene,
        codec,
        prototypes,
        views,
    })
}

fn check_pairing(pred: &Bundle, gt: &Bundle) -> Result<()> {
    if pred.views.len() != gt.views.len() {
        return Err(Error::mismatch("bundle views", gt.views.len(), pred.views.len()));
    }
    for (i, (p, g)) in pred.views.iter().zip(&gt.views).enumerate() {
        if (p.camera.width, p.camera.height) != (g.camera.width, g.camera.height) {
            return Err(Error::mismatch(
                "bundle view size",
                format!("{}x{}", g.camera.width, g.camera.height),
                format!("{}x{} (view {i})", p.camera.width, p.camera.height),
            ));
        }
    }
    Ok(())
}

fn stack(images: &[&ImageBuffer]) -> Result<ImageBuffer> {
    let first = images[0];
    let mut data = Vec::new();
    let mut height = 0;
    for img in images {
        if (img.width, img.channels) != (first.width, first.channels) {
            return Err(Error::mismatch("stacked image", first.shape_str(), img.shape_str()));
        }
        data.extend_from_slice(&img.data);
        height += img.height;
    }
    ImageBuffer::from_data(first.width, height, first.channels, data)
}

/// Compares a predicted bundle with ground truth: PSNR over all views'
/// pixels, mean per-view SSIM, depth error on pixels valid in the predicted
/// alpha, and segmentation of the predicted features against `prototypes`.
pub fn evaluate_bundles(pred: &Bundle, gt: &Bundle, prototypes: &PrototypeSet) -> Result<MetricReport> {
    check_pairing(pred, gt)?;
    let pc: Vec<&ImageBuffer> = pred.views.iter().map(|v| &v.color).collect();
    let gc: Vec<&ImageBuffer> = gt.views.iter().map(|v| &v.color).collect();
    let psnr = metrics::psnr(&stack(&pc)?, &stack(&gc)?)?;
    let mut ssim = 0.0;
    for (p, g) in pc.iter().zip(&gc) {
        ssim += metrics::ssim(p, g)?;
    }
    ssim /= pc.len() as f64;

    let pd = stack(&pred.views.iter().map(|v| &v.depth).collect::<Vec<_>>())?;
    let gd = stack(&gt.views.iter().map(|v| &v.depth).collect::<Vec<_>>())?;
    let pa = stack(&pred.views.iter().map(|v| &v.alpha).collect::<Vec<_>>())?;
    let valid = metrics::depth_valid_mask(&pa, &gd);
    let depth = if valid.iter().any(|&v| v) {
        Some(metrics::depth_metrics(&pd, &gd, &valid)?)
    } else {
        None
    };

    let mut pred_labels = Vec::new();
    let mut gt_labels = Vec::new();
    for (p, g) in pred.views.iter().zip(&gt.views) {
        pred_labels.extend(metrics::labels_from_image(&segment(&p.features, prototypes)?.labels));
        gt_labels.extend(metrics::labels_from_image(&g.labels));
    }
    let nc = prototypes.num_classes();
    let seg = if gt_labels.iter().any(|&l| l < nc) {
        Some(metrics::seg_metrics(&pred_labels, &gt_labels, nc)?)
    } else {
        None
    };

    Ok(MetricReport {
        psnr: Some(psnr),
        ssim: Some(ssim),
        rel: depth.map(|d| d.rel),
        tau: depth.map(|d| d.tau),
        miou: seg.as_ref().map(|s| s.miou),
        acc: seg.as_ref().map(|s| s.acc),
        per_class_iou: seg
            .map(|s| {
                s.per_class_iou
                    .iter()
                    .zip(&prototypes.labels)
                    .filter_map(|(iou, name)| iou.map(|v| (name.clone(), v)))
                    .collect()
            })
            .unwrap_or_default(),
    })
}

/// Loss report of a predicted bundle against ground truth.
pub fn bundle_losses(pred: &Bundle, gt: &Bundle, w: &LossWeights) -> Result<LossReport> {
    check_pairing(pred, gt)?;
    let preds = pred.views.iter().map(BundleView::prediction).collect::<Result<Vec<_>>>()?;
    let views = gt.fit_views()?;
    Ok(score_predictions(&preds, &views, w)?.0)
}
