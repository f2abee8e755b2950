//! Scene, camera, image and point-map types.

use std::fmt;

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian;

pub type Vec3 = Vector3<f64>;
/// Quaternion stored as `(w, x, y, z)`.
pub type Quat = Vector4<f64>;

const NORM_TOL: f64 = 1e-9;
const OPACITY_TOL: f64 = 1e-12;

/// One Gaussian with both its pre-activation latents and activated values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub center: Vec3,
    pub opacity_raw: f64,
    pub opacity: f64,
    pub color: Vec3,
    pub scale_raw: Vec3,
    pub scale: Vec3,
    pub rotation_raw: Quat,
    pub rotation: Quat,
    pub sem_feature: Vec<f64>,
    /// Codec output; `None` until the scene has been run through an encoder.
    pub sem_compressed: Option<Vec<f64>>,
}

impl GaussianPrimitive {
    /// Builds a primitive from raw latents, activating opacity, scale and rotation.
    pub fn from_raw(
        center: Vec3,
        opacity_raw: f64,
        color: Vec3,
        scale_raw: Vec3,
        rotation_raw: Quat,
        sem_feature: Vec<f64>,
        median_depth: f64,
    ) -> Result<Self> {
        let rotation = gaussian::activate_rotation(&rotation_raw)?;
        Ok(Self {
            center,
            opacity_raw,
            opacity: gaussian::activate_opacity(opacity_raw),
            color,
            scale_raw,
            scale: gaussian::activate_scale(&scale_raw, median_depth),
            rotation_raw,
            rotation,
            sem_feature,
            sem_compressed: None,
        })
    }

    /// Recomputes the activated fields from the raw ones.
    pub fn refresh(&mut self, median_depth: f64) -> Result<()> {
        self.opacity = gaussian::activate_opacity(self.opacity_raw);
        self.scale = gaussian::activate_scale(&self.scale_raw, median_depth);
        self.rotation = gaussian::activate_rotation(&self.rotation_raw)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub sem_dim: usize,
    pub compressed_dim: usize,
    pub median_depth: f64,
}

impl GaussianScene {
    pub fn new(sem_dim: usize, compressed_dim: usize, median_depth: f64) -> Self {
        Self {
            primitives: Vec::new(),
            sem_dim,
            compressed_dim,
            median_depth,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn is_compressed(&self) -> bool {
        self.primitives.iter().all(|p| p.sem_compressed.is_some())
    }

    pub fn refresh_activations(&mut self) -> Result<()> {
        let median = self.median_depth;
        self.primitives.iter_mut().try_for_each(|p| p.refresh(median))
    }
}

/// A broken invariant reported by [`validate_scene`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub primitive: Option<usize>,
    pub invariant: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.primitive {
            Some(i) => write!(f, "primitive {i}: {}", self.invariant),
            None => write!(f, "scene: {}", self.invariant),
        }
    }
}

/// Lists every invariant the scene breaks. Never fails.
pub fn validate_scene(scene: &GaussianScene) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut scene_violation = |msg: String| {
        out.push(Violation {
            primitive: None,
            invariant: msg,
        })
    };
    if !(scene.median_depth > 0.0 && scene.median_depth.is_finite()) {
        scene_violation(format!(
            "median depth must be positive, got {}",
            scene.median_depth
        ));
    }
    if scene.compressed_dim > scene.sem_dim {
        scene_violation(format!(
            "compressed dim {} exceeds semantic dim {}",
            scene.compressed_dim, scene.sem_dim
        ));
    }

    for (i, p) in scene.primitives.iter().enumerate() {
        let mut push = |msg: String| {
            out.push(Violation {
                primitive: Some(i),
                invariant: msg,
            })
        };
        let all_finite = p.center.iter().all(|v| v.is_finite())
            && p.color.iter().all(|v| v.is_finite())
            && p.scale_raw.iter().all(|v| v.is_finite())
            && p.rotation_raw.iter().all(|v| v.is_finite())
            && p.opacity_raw.is_finite()
            && p.sem_feature.iter().all(|v| v.is_finite());
        if !all_finite {
            push("non-finite parameter".into());
        }
        if !(0.0..=1.0).contains(&p.opacity) {
            push(format!("opacity {} outside [0,1]", p.opacity));
        } else if (gaussian::activate_opacity(p.opacity_raw) - p.opacity).abs() > OPACITY_TOL {
            push("opacity does not match sigmoid(opacity_raw)".into());
        }
        if !p.scale.iter().all(|&s| s > 0.0) {
            push(format!(
                "scale positivity: ({}, {}, {})",
                p.scale.x, p.scale.y, p.scale.z
            ));
        }
        let norm = p.rotation.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            push(format!("quaternion norm {norm} is not 1"));
        }
        if p.sem_feature.len() != scene.sem_dim {
            push(format!(
                "semantic feature length {} != sem_dim {}",
                p.sem_feature.len(),
                scene.sem_dim
            ));
        }
        if let Some(c) = &p.sem_compressed {
            if c.len() != scene.compressed_dim {
                push(format!(
                    "compressed feature length {} != compressed_dim {}",
                    c.len(),
                    scene.compressed_dim
                ));
            }
        }
    }
    out
}

/// Pinhole camera with a world-to-camera rigid pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Camera {
    /// Camera at the world origin looking down +z.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; image y points along world `-up`.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        Self {
            fx,
            fy,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation,
            translation,
        }
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Camera-space direction with unit z through pixel `(x, y)`.
    pub fn ray(&self, x: f64, y: f64) -> Vec3 {
        Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// World point seen at pixel `(x, y)` at camera-space depth `depth`.
    pub fn unproject(&self, x: usize, y: usize, depth: f64) -> Vec3 {
        self.to_world(&(self.ray(x as f64, y as f64) * depth))
    }

    /// Unprojects every pixel of a one-channel depth map, row-major.
    pub fn unproject_depth(&self, depth: &ImageBuffer) -> Result<Vec<Vec3>> {
        if (depth.width, depth.height, depth.channels) != (self.width, self.height, 1) {
            return Err(Error::mismatch(
                "depth map",
                format!("{}x{}x1", self.width, self.height),
                depth.shape_str(),
            ));
        }
        Ok((0..depth.pixel_count())
            .map(|i| self.unproject(i % self.width, i / self.width, depth.data[i]))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("camera: {msg}")));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive ({}, {})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx {} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy {} outside [0, {})", self.cy, self.height));
        }
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(ortho < 1e-9) || !((r.determinant() - 1.0).abs() < 1e-9) {
            return bad("pose rotation is not a proper rotation".into());
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return bad("non-finite translation".into());
        }
        Ok(())
    }
}

/// Dense row-major float image with an arbitrary channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::mismatch(
                "image data length",
                width * height * channels,
                data.len(),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image element {i}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_shape(&self, other: &ImageBuffer, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::mismatch(context, self.shape_str(), other.shape_str()))
        }
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> ImageBuffer {
        let data = (0..self.pixel_count()).map(|i| self.pixel(i)[c]).collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

/// Reference geometry: dense points plus per-pixel confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub confidence: Vec<f64>,
}

impl ReferencePointMap {
    pub fn new(width: usize, height: usize, points: Vec<Vec3>, confidence: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if points.len() != n || confidence.len() != n {
            return Err(Error::mismatch(
                "reference point map",
                n,
                format!("{} points / {} confidences", points.len(), confidence.len()),
            ));
        }
        if let Some(i) = confidence.iter().position(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::NonFinite(format!("confidence at pixel {i}")));
        }
        Ok(Self {
            width,
            height,
            points,
            confidence,
        })
    }
}

/// Predicted per-pixel 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedPointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
}

impl PredictedPointMap {
    pub fn new(width: usize, height: usize, points: Vec<Vec3>) -> Result<Self> {
        if points.len() != width * height {
            return Err(Error::mismatch("predicted point map", width * height, points.len()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite(format!("predicted point at pixel {i}")));
        }
        Ok(Self {
            width,
            height,
            points,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub ratio: f64,
}

impl GeometryMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

/// Median camera-space depth of the centers in front of the camera.
pub fn compute_median_depth(centers: &[Vec3], camera: &Camera) -> Result<f64> {
    let mut depths: Vec<f64> = centers
        .iter()
        .map(|c| camera.to_camera(c).z)
        .filter(|&z| z > 0.0)
        .collect();
    if depths.is_empty() {
        return Err(Error::NoVisibleGeometry);
    }
    depths.sort_by(f64::total_cmp);
    let n = depths.len();
    Ok(if n % 2 == 1 {
        depths[n / 2]
    } else {
        0.5 * (depths[n / 2 - 1] + depths[n / 2])
    })
}
