//! Seeded synthetic scenes with rendered ground truth.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::{render_bundle, Bundle};
use crate::error::{Error, Result};
use crate::scene::{compute_median_depth, Camera, GaussianPrimitive, GaussianScene, Quat, Vec3};
use crate::semantic::{FeatureCodec, PrototypeSet};

pub const SCENE_SPEC_USAGE: &str = "scene spec is a JSON object with required fields \
gaussians (>= 1) and cameras (>= 1), and optional seed, resolution (>= 8), sem_dim, \
compressed_dim, classes, camera_radius, elevation_deg, focal_scale, extent, scale";

fn default_resolution() -> usize {
    48
}
fn default_sem_dim() -> usize {
    64
}
fn default_compressed_dim() -> usize {
    16
}
fn default_classes() -> Vec<String> {
    ["wall", "floor", "chair", "table"].map(String::from).to_vec()
}
fn default_radius() -> f64 {
    4.0
}
fn default_elevation() -> f64 {
    30.0
}
fn default_focal_scale() -> f64 {
    1.2
}
fn default_extent() -> f64 {
    0.8
}
fn default_scale() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub seed: u64,
    pub gaussians: usize,
    pub cameras: usize,
    /// Square image side in pixels.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_sem_dim")]
    pub sem_dim: usize,
    #[serde(default = "default_compressed_dim")]
    pub compressed_dim: usize,
    #[serde(default = "default_classes")]
    pub classes: Vec<String>,
    /// Distance of every camera from the origin.
    #[serde(default = "default_radius")]
    pub camera_radius: f64,
    #[serde(default = "default_elevation")]
    pub elevation_deg: f64,
    /// Focal length as a multiple of the resolution.
    #[serde(default = "default_focal_scale")]
    pub focal_scale: f64,
    /// Centers are drawn from `[-extent, extent]³`.
    #[serde(default = "default_extent")]
    pub extent: f64,
    /// Typical world-space standard deviation of a Gaussian.
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl SceneSpec {
    pub fn new(seed: u64, gaussians: usize, cameras: usize, resolution: usize) -> Self {
        Self {
            seed,
            gaussians,
            cameras,
            resolution,
            sem_dim: default_sem_dim(),
            compressed_dim: default_compressed_dim(),
            classes: default_classes(),
            camera_radius: default_radius(),
            elevation_deg: default_elevation(),
            focal_scale: default_focal_scale(),
            extent: default_extent(),
            scale: default_scale(),
        }
    }

    /// Parses a spec, rejecting empty documents with the usage text.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("scene spec: {e}; {SCENE_SPEC_USAGE}")))?;
        if value.as_object().is_none_or(|o| o.is_empty()) {
            return Err(Error::InvalidConfig(format!("empty scene spec; {SCENE_SPEC_USAGE}")));
        }
        let spec: SceneSpec = serde_json::from_value(value)
            .map_err(|e| Error::InvalidConfig(format!("scene spec: {e}; {SCENE_SPEC_USAGE}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("scene spec: {m}; {SCENE_SPEC_USAGE}")));
        if self.gaussians == 0 || self.cameras == 0 {
            return bad("gaussians and cameras must be at least 1".into());
        }
        if self.resolution < 8 {
            return bad(format!("resolution {} below 8", self.resolution));
        }
        if self.classes.is_empty() || self.classes.len() > self.compressed_dim {
            return bad(format!(
                "need 1..={} classes, got {}",
                self.compressed_dim,
                self.classes.len()
            ));
        }
        if self.compressed_dim > self.sem_dim || self.compressed_dim == 0 {
            return bad(format!(
                "compressed_dim {} must be in 1..={}",
                self.compressed_dim, self.sem_dim
            ));
        }
        let positive = [self.camera_radius, self.focal_scale, self.extent, self.scale];
        if !positive.iter().all(|v| *v > 0.0 && v.is_finite()) || self.camera_radius <= self.extent * 3f64.sqrt() {
            return bad("radius, focal_scale, extent and scale must be positive, cameras outside the scene".into());
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn f32_exact(m: DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v as f32 as f64)
}

/// Random `d × k` matrix with orthonormal columns, rounded to f32.
fn orthonormal_basis(rng: &mut ChaCha8Rng, d: usize, k: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, k, |_, _| gaussian(rng));
    f32_exact(a.qr().q())
}

/// Cameras on a ring at `elevation_deg` above the xy-plane, all facing the origin.
pub fn ring_cameras(spec: &SceneSpec) -> Vec<Camera> {
    let el = spec.elevation_deg.to_radians();
    let f = spec.focal_scale * spec.resolution as f64;
    (0..spec.cameras)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / spec.cameras as f64;
            let eye = spec.camera_radius * Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin());
            Camera::look_at(eye, Vec3::zeros(), Vec3::z(), f, f, spec.resolution, spec.resolution)
        })
        .collect()
}

/// Builds the scene, cameras, codec and prototypes of `spec` and renders
/// every view. Primitive `j` belongs to class `j mod N_C`, with its feature
/// set to that class's prototype. The codec encodes by projecting onto an
/// orthonormal basis whose first `N_C` vectors are the prototypes.
pub fn synthesize(spec: &SceneSpec) -> Result<Bundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, dc, nc) = (spec.sem_dim, spec.compressed_dim, spec.classes.len());
    let basis = orthonormal_basis(&mut rng, d, dc);
    let codec = FeatureCodec::new(
        basis.transpose(),
        nalgebra::DVector::zeros(dc),
        basis.clone(),
        nalgebra::DVector::zeros(d),
    )?;
    let protos = basis.columns(0, nc).transpose();
    let prototypes = PrototypeSet::new(protos.clone(), spec.classes.clone())?;

    let cameras = ring_cameras(spec);
    let centers: Vec<Vec3> = (0..spec.gaussians)
        .map(|_| Vec3::from_fn(|_, _| rng.random_range(-spec.extent..=spec.extent)))
        .collect();
    let median = compute_median_depth(&centers, &cameras[0])?;
    let mut scene = GaussianScene::new(d, dc, median);
    for (j, center) in centers.into_iter().enumerate() {
        let scale_raw = Vec3::from_fn(|_, _| (spec.scale / median).ln() + 0.3 * gaussian(&mut rng));
        let rotation_raw = loop {
            let q = Quat::from_fn(|_, _| gaussian(&mut rng));
            if q.norm() > 0.1 {
                break q;
            }
        };
        let prim = GaussianPrimitive::from_raw(
            center,
            rng.random_range(1.0..3.0),
            Vec3::from_fn(|_, _| rng.random_range(0.1..0.9)),
            scale_raw,
            rotation_raw,
            protos.row(j % nc).iter().copied().collect(),
            median,
        )?;
        scene.primitives.push(prim);
    }
    let cams: Vec<&Camera> = cameras.iter().collect();
    render_bundle(spec.seed, &scene, &codec, &prototypes, &cams)
}

/// Adds `N(0, sigma²)` noise to every raw parameter (center, opacity, color,
/// scale, rotation, semantic feature). Colors stay in `[0, 1]`.
pub fn perturb_scene(scene: &GaussianScene, sigma: f64, seed: u64) -> Result<GaussianScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    for p in &mut out.primitives {
        p.center += Vec3::from_fn(|_, _| sigma * gaussian(&mut rng));
        p.opacity_raw += sigma * gaussian(&mut rng);
        p.color = (p.color + Vec3::from_fn(|_, _| sigma * gaussian(&mut rng))).map(|c| c.clamp(0.0, 1.0));
        p.scale_raw += Vec3::from_fn(|_, _| sigma * gaussian(&mut rng));
        p.rotation_raw += Quat::from_fn(|_, _| sigma * gaussian(&mut rng));
        for f in &mut p.sem_feature {
            *f += sigma * gaussian(&mut rng);
        }
        p.sem_compressed = None;
    }
    out.refresh_activations()?;
    Ok(out)
}
