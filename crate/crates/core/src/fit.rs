//! Per-scene fitting: render, score against targets, backpropagate, Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{CodecGrad, GradientBundle};
use crate::losses::{
    loss_geo, loss_rgb, loss_sem, total_value, LossReport, LossWeights, ViewReport,
};
use crate::raster::{render, render_backward, RenderUpstream};
use crate::scene::{
    Camera, GaussianScene, ImageBuffer, PredictedPointMap, ReferencePointMap, Vec3,
};
use crate::semantic::{decode_features, decoder_backward, encode_features, encoder_backward, FeatureCodec};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::mismatch(
                "adam parameter layout",
                self.m.len(),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    #[serde(default)]
    pub weights: LossWeights,
    /// Centers, raw opacity, color, raw scale and raw rotation.
    #[serde(default = "yes")]
    pub train_geometry: bool,
    /// Per-primitive semantic features.
    #[serde(default = "yes")]
    pub train_semantics: bool,
    #[serde(default = "yes")]
    pub train_codec: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.01,
            weights: LossWeights::default(),
            train_geometry: true,
            train_semantics: true,
            train_codec: true,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        self.weights.validate()
    }
}

/// Supervision for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct FitView {
    pub camera: Camera,
    /// Three-channel target image.
    pub target: ImageBuffer,
    /// Teacher features with `d` channels.
    pub teacher: ImageBuffer,
    pub reference: ReferencePointMap,
}

/// Everything the losses look at for one rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPrediction {
    pub color: ImageBuffer,
    /// Decoded features with `d` channels.
    pub decoded: ImageBuffer,
    pub points: PredictedPointMap,
}

/// Unweighted loss gradients on each view's predictions.
#[derive(Clone, Debug)]
pub struct PredictionGrads {
    pub color: Vec<ImageBuffer>,
    pub decoded: Vec<ImageBuffer>,
    pub points: Vec<Vec<Vec3>>,
}

fn first_non_finite(name: &str, data: impl IntoIterator<Item = f64>) -> Result<()> {
    match data.into_iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{name} element {i}"))),
        None => Ok(()),
    }
}

/// Scores predictions against their views.
pub fn score_predictions(
    preds: &[ViewPrediction],
    views: &[FitView],
    w: &LossWeights,
) -> Result<(LossReport, PredictionGrads)> {
    let color: Vec<ImageBuffer> = preds.iter().map(|p| p.color.clone()).collect();
    let targets: Vec<ImageBuffer> = views.iter().map(|v| v.target.clone()).collect();
    let decoded: Vec<ImageBuffer> = preds.iter().map(|p| p.decoded.clone()).collect();
    let teachers: Vec<ImageBuffer> = views.iter().map(|v| v.teacher.clone()).collect();
    let points: Vec<PredictedPointMap> = preds.iter().map(|p| p.points.clone()).collect();
    let refs: Vec<ReferencePointMap> = views.iter().map(|v| v.reference.clone()).collect();

    let rgb = loss_rgb(&color, &targets, w, None)?;
    let sem = loss_sem(&decoded, &teachers)?;
    let geo = loss_geo(&points, &refs, w)?.loss;
    for (name, v) in [("l_rgb", rgb.value), ("l_sem", sem.value), ("l_geo", geo.value)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let report = LossReport {
        l_rgb: rgb.value,
        l_sem: sem.value,
        l_geo: geo.value,
        l_total: total_value(rgb.value, sem.value, geo.value, w),
        per_view: (0..preds.len())
            .map(|i| ViewReport {
                l_rgb: rgb.per_view[i],
                l_sem: sem.per_view[i],
                l_geo: geo.per_view[i],
            })
            .collect(),
    };
    Ok((
        report,
        PredictionGrads {
            color: rgb.grads,
            decoded: sem.grads,
            points: geo.grads,
        },
    ))
}

/// Renders every view of `scene` (features already compressed) and decodes it.
pub fn predict_views(
    scene: &GaussianScene,
    codec: &FeatureCodec,
    cameras: &[&Camera],
) -> Result<Vec<(ViewPrediction, ImageBuffer)>> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let out = render(scene, cam)?;
            first_non_finite(&format!("rendered color of view {i}"), out.color.data.iter().copied())?;
            first_non_finite(&format!("rendered features of view {i}"), out.features.data.iter().copied())?;
            first_non_finite(&format!("rendered depth of view {i}"), out.depth.data.iter().copied())?;
            let decoded = decode_features(&out.features, codec)?;
            let points = PredictedPointMap::new(cam.width, cam.height, cam.unproject_depth(&out.depth)?)?;
            Ok((
                ViewPrediction {
                    color: out.color,
                    decoded,
                    points,
                },
                out.features,
            ))
        })
        .collect()
}

/// Loss report for `scene` under `codec` against `views`.
pub fn evaluate_scene(
    scene: &GaussianScene,
    codec: &FeatureCodec,
    views: &[FitView],
    w: &LossWeights,
) -> Result<LossReport> {
    let encoded = encode_features(scene, codec)?;
    let cams: Vec<&Camera> = views.iter().map(|v| &v.camera).collect();
    let preds: Vec<ViewPrediction> = predict_views(&encoded, codec, &cams)?.into_iter().map(|p| p.0).collect();
    Ok(score_predictions(&preds, views, w)?.0)
}

/// Loss report and full gradient (primitives and codec) of the weighted total.
pub fn loss_and_gradient(
    scene: &GaussianScene,
    codec: &FeatureCodec,
    views: &[FitView],
    w: &LossWeights,
) -> Result<(LossReport, GradientBundle)> {
    let encoded = encode_features(scene, codec)?;
    let cams: Vec<&Camera> = views.iter().map(|v| &v.camera).collect();
    let rendered = predict_views(&encoded, codec, &cams)?;
    let preds: Vec<ViewPrediction> = rendered.iter().map(|p| p.0.clone()).collect();
    let (report, grads) = score_predictions(&preds, views, w)?;

    let (d, dc) = (codec.sem_dim(), codec.compressed_dim());
    let mut total = GradientBundle::zeros(scene.len(), d, dc);
    let mut codec_grad = CodecGrad::zeros(d, dc);
    for (i, view) in views.iter().enumerate() {
        let cam = &view.camera;
        let mut upstream = RenderUpstream::zeros(cam.width, cam.height, dc);
        upstream.color = grads.color[i].clone();

        let mut g_decoded = grads.decoded[i].clone();
        g_decoded.data.iter_mut().for_each(|g| *g *= w.lambda_sem);
        upstream.features = decoder_backward(&rendered[i].1, &g_decoded, codec, &mut codec_grad)?;

        // point = Rᵀ(D·ray − t), so dL/dD = rayᵀ R dL/dpoint.
        for (p, g) in grads.points[i].iter().enumerate() {
            let ray = cam.ray((p % cam.width) as f64, (p / cam.width) as f64);
            upstream.depth.data[p] = w.lambda_geo * ray.dot(&(cam.rotation * g));
        }
        let g = render_backward(&encoded, cam, &upstream)?;
        total.add_scaled(&g, 1.0);
    }

    let feats: Vec<&[f64]> = scene.primitives.iter().map(|p| p.sem_feature.as_slice()).collect();
    let ups: Vec<&[f64]> = total.primitives.iter().map(|g| g.sem_compressed.as_slice()).collect();
    let df = encoder_backward(&feats, &ups, codec, &mut codec_grad)?;
    for (g, f) in total.primitives.iter_mut().zip(df) {
        g.sem_feature = f;
    }
    total.codec = Some(codec_grad);
    Ok((report, total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Fitted scene with features compressed by the fitted codec.
    pub scene: GaussianScene,
    pub codec: FeatureCodec,
    /// Loss before each update.
    pub trace: Vec<LossReport>,
    /// Loss of the returned parameters.
    pub final_loss: LossReport,
}

const GEOMETRY_PARAMS: usize = 3 + 1 + 3 + 3 + 4;

fn geometry_params(scene: &GaussianScene) -> Vec<f64> {
    let mut out = Vec::with_capacity(scene.len() * GEOMETRY_PARAMS);
    for p in &scene.primitives {
        out.extend(p.center.iter());
        out.push(p.opacity_raw);
        out.extend(p.color.iter());
        out.extend(p.scale_raw.iter());
        out.extend(p.rotation_raw.iter());
    }
    out
}

fn geometry_grads(g: &GradientBundle) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.primitives.len() * GEOMETRY_PARAMS);
    for p in &g.primitives {
        out.extend(p.center.iter());
        out.push(p.opacity_raw);
        out.extend(p.color.iter());
        out.extend(p.scale_raw.iter());
        out.extend(p.rotation_raw.iter());
    }
    out
}

fn set_geometry(scene: &mut GaussianScene, params: &[f64]) {
    for (p, c) in scene.primitives.iter_mut().zip(params.chunks_exact(GEOMETRY_PARAMS)) {
        p.center = Vec3::new(c[0], c[1], c[2]);
        p.opacity_raw = c[3];
        p.color = Vec3::new(c[4], c[5], c[6]).map(|v| v.clamp(0.0, 1.0));
        p.scale_raw = Vec3::new(c[7], c[8], c[9]);
        p.rotation_raw = crate::scene::Quat::new(c[10], c[11], c[12], c[13]);
    }
}

fn codec_params(c: &FeatureCodec) -> Vec<f64> {
    c.enc_weight
        .iter()
        .chain(c.enc_bias.iter())
        .chain(c.dec_weight.iter())
        .chain(c.dec_bias.iter())
        .copied()
        .collect()
}

fn codec_grads(c: &CodecGrad) -> Vec<f64> {
    c.enc_weight
        .iter()
        .chain(c.enc_bias.iter())
        .chain(c.dec_weight.iter())
        .chain(c.dec_bias.iter())
        .copied()
        .collect()
}

fn set_codec(c: &mut FeatureCodec, params: &[f64]) {
    let mut it = params.iter().copied();
    for v in c
        .enc_weight
        .iter_mut()
        .chain(c.enc_bias.iter_mut())
        .chain(c.dec_weight.iter_mut())
        .chain(c.dec_bias.iter_mut())
    {
        *v = it.next().expect("codec layout");
    }
}

fn check_gradient(g: &GradientBundle) -> Result<()> {
    for (i, p) in g.primitives.iter().enumerate() {
        let groups: [(&str, &[f64]); 7] = [
            ("center", p.center.as_slice()),
            ("opacity_raw", std::slice::from_ref(&p.opacity_raw)),
            ("color", p.color.as_slice()),
            ("scale_raw", p.scale_raw.as_slice()),
            ("rotation_raw", p.rotation_raw.as_slice()),
            ("sem_feature", &p.sem_feature),
            ("sem_compressed", &p.sem_compressed),
        ];
        for (name, data) in groups {
            first_non_finite(&format!("gradient of primitive {i} {name}"), data.iter().copied())?;
        }
    }
    if let Some(c) = &g.codec {
        first_non_finite("codec gradient", codec_grads(c))?;
    }
    Ok(())
}

/// Fits `init` (and optionally `codec`) to `views` with Adam.
pub fn fit_scene(
    init: &GaussianScene,
    codec: &FeatureCodec,
    views: &[FitView],
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidConfig("fit needs at least one view".into()));
    }
    if init.sem_dim != codec.sem_dim() || init.compressed_dim != codec.compressed_dim() {
        return Err(Error::mismatch(
            "fit codec dims",
            format!("{}->{}", init.sem_dim, init.compressed_dim),
            format!("{}->{}", codec.sem_dim(), codec.compressed_dim()),
        ));
    }
    let mut scene = init.clone();
    scene.refresh_activations()?;
    let mut codec = codec.clone();
    let d = scene.sem_dim;

    let mut geo_opt = AdamState::new(scene.len() * GEOMETRY_PARAMS, cfg.lr);
    let mut sem_opt = AdamState::new(scene.len() * d, cfg.lr);
    let mut codec_opt = AdamState::new(codec_params(&codec).len(), cfg.lr);

    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (report, grad) = loss_and_gradient(&scene, &codec, views, &cfg.weights)?;
        check_gradient(&grad)?;
        log::debug!("iteration {it}: l_total {:.6e}", report.l_total);
        trace.push(report);

        if cfg.train_geometry {
            let mut params = geometry_params(&scene);
            geo_opt.adam_step(&mut params, &geometry_grads(&grad))?;
            set_geometry(&mut scene, &params);
        }
        if cfg.train_semantics {
            let mut params: Vec<f64> = scene.primitives.iter().flat_map(|p| p.sem_feature.iter().copied()).collect();
            let grads: Vec<f64> = grad.primitives.iter().flat_map(|p| p.sem_feature.iter().copied()).collect();
            sem_opt.adam_step(&mut params, &grads)?;
            for (p, f) in scene.primitives.iter_mut().zip(params.chunks_exact(d.max(1))) {
                p.sem_feature.copy_from_slice(&f[..d]);
            }
        }
        if cfg.train_codec {
            let mut params = codec_params(&codec);
            let cg = grad.codec.as_ref().expect("codec gradient");
            codec_opt.adam_step(&mut params, &codec_grads(cg))?;
            set_codec(&mut codec, &params);
        }
        scene.refresh_activations()?;
    }
    let final_loss = evaluate_scene(&scene, &codec, views, &cfg.weights)?;
    Ok(FitResult {
        scene: encode_features(&scene, &codec)?,
        codec,
        trace,
        final_loss,
    })
}
