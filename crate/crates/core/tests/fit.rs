mod common;

use common::{camera, random_scene, rng};
use semsplat_core::fit::{fit_scene, predict_views, FitConfig, FitView};
use semsplat_core::losses::LossWeights;
use semsplat_core::scene::{Camera, GaussianScene, ReferencePointMap};
use semsplat_core::semantic::{encode_features, FeatureCodec};
use semsplat_core::synth::{perturb_scene, synthesize, SceneSpec};

/// Views whose targets are the scene's own renders at full precision.
fn self_views(scene: &GaussianScene, codec: &FeatureCodec, cams: &[Camera]) -> Vec<FitView> {
    let encoded = encode_features(scene, codec).unwrap();
    let refs: Vec<&Camera> = cams.iter().collect();
    predict_views(&encoded, codec, &refs)
        .unwrap()
        .into_iter()
        .zip(cams)
        .map(|((pred, _), cam)| FitView {
            camera: cam.clone(),
            target: pred.color,
            teacher: pred.decoded,
            reference: ReferencePointMap::new(
                cam.width,
                cam.height,
                pred.points.points,
                vec![1.0; cam.width * cam.height],
            )
            .unwrap(),
        })
        .collect()
}

fn setup() -> (GaussianScene, FeatureCodec, Vec<FitView>) {
    let mut r = rng(11);
    let scene = random_scene(&mut r, 6, 4, 3, 1.5);
    let codec = FeatureCodec::new(
        nalgebra::DMatrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin()),
        nalgebra::DVector::from_element(3, 0.1),
        nalgebra::DMatrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64 * 0.53).cos()),
        nalgebra::DVector::from_element(4, -0.05),
    )
    .unwrap();
    let mut side = camera(16);
    side.translation.x += 0.4;
    let views = self_views(&scene, &codec, &[camera(16), side]);
    (scene, codec, views)
}

fn max_param_change(a: &GaussianScene, b: &GaussianScene) -> f64 {
    a.primitives
        .iter()
        .zip(&b.primitives)
        .flat_map(|(p, q)| {
            let geo = (p.center - q.center)
                .iter()
                .chain((p.color - q.color).iter())
                .chain((p.scale_raw - q.scale_raw).iter())
                .chain((p.rotation_raw - q.rotation_raw).iter())
                .map(|v| v.abs())
                .chain([(p.opacity_raw - q.opacity_raw).abs()])
                .collect::<Vec<_>>();
            let sem = p.sem_feature.iter().zip(&q.sem_feature).map(|(x, y)| (x - y).abs());
            geo.into_iter().chain(sem).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let (scene, codec, views) = setup();
    let cfg = FitConfig { iterations: 5, ..FitConfig::default() };
    let fit = fit_scene(&scene, &codec, &views, &cfg).unwrap();
    for report in fit.trace.iter().chain([&fit.final_loss]) {
        assert!(report.l_total.abs() < 1e-12, "{report:?}");
    }
    assert!(max_param_change(&scene, &fit.scene) < 1e-6);
}

#[test]
fn zero_weights_isolate_semantics() {
    let (scene, codec, mut views) = setup();
    for v in &mut views {
        v.teacher.data.iter_mut().for_each(|x| *x = -*x);
        v.target.data.iter_mut().for_each(|x| *x = 1.0 - *x);
    }
    let weights = LossWeights { lambda_sem: 0.0, lambda_geo: 0.0, ..LossWeights::default() };
    let cfg = FitConfig { iterations: 3, weights, ..FitConfig::default() };
    let fit = fit_scene(&scene, &codec, &views, &cfg).unwrap();
    assert_eq!(fit.codec, codec);
    for (p, q) in scene.primitives.iter().zip(&fit.scene.primitives) {
        assert_eq!(p.sem_feature, q.sem_feature);
    }
    assert!(max_param_change(&scene, &fit.scene) > 1e-3);
}

#[test]
fn frozen_groups_stay_put() {
    let (scene, codec, views) = setup();
    let init = perturb_scene(&scene, 0.1, 3).unwrap();
    let cfg = FitConfig { iterations: 2, train_geometry: false, train_codec: false, ..FitConfig::default() };
    let fit = fit_scene(&init, &codec, &views, &cfg).unwrap();
    assert_eq!(fit.codec, codec);
    for (p, q) in init.primitives.iter().zip(&fit.scene.primitives) {
        assert_eq!((p.center, p.opacity_raw, p.scale_raw, p.rotation_raw), (q.center, q.opacity_raw, q.scale_raw, q.rotation_raw));
    }
}

#[test]
fn single_iteration_changes_a_perturbed_scene() {
    let (scene, codec, views) = setup();
    let init = perturb_scene(&scene, 0.1, 4).unwrap();
    let fit = fit_scene(&init, &codec, &views, &FitConfig { iterations: 1, ..FitConfig::default() }).unwrap();
    assert_eq!(fit.trace.len(), 1);
    assert!(max_param_change(&init, &fit.scene) > 1e-3);
}

#[test]
fn fit_is_identical_across_thread_counts() {
    let gt = synthesize(&SceneSpec::new(2, 6, 2, 24)).unwrap();
    let init = perturb_scene(&gt.scene, 0.1, 5).unwrap();
    let views = gt.fit_views().unwrap();
    let cfg = FitConfig { iterations: 5, ..FitConfig::default() };
    let run = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| fit_scene(&init, &gt.codec, &views, &cfg).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(8));
    assert!(one.final_loss.l_total < one.trace[0].l_total);
}

#[test]
fn rejects_bad_configs() {
    let (scene, codec, views) = setup();
    assert!(fit_scene(&scene, &codec, &views, &FitConfig { iterations: 0, ..FitConfig::default() }).is_err());
    assert!(fit_scene(&scene, &codec, &views, &FitConfig { lr: -1.0, ..FitConfig::default() }).is_err());
    assert!(fit_scene(&scene, &codec, &[], &FitConfig::default()).is_err());
    assert!(fit_scene(&scene, &FeatureCodec::identity(5), &views, &FitConfig::default()).is_err());
}
