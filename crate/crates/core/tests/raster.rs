mod common;

use common::{camera, close, random_scene, rng};
use rand::Rng;
use semsplat_core::raster::{
    render, render_backward, RenderOutput, RenderUpstream, ALPHA_CLAMP, ALPHA_SKIP,
    SUPPORT_SIGMA, TRANSMITTANCE_STOP,
};
use semsplat_core::scene::{Camera, GaussianScene, ImageBuffer};

fn random_upstream(r: &mut impl Rng, w: usize, h: usize, dc: usize) -> RenderUpstream {
    let mut fill = |c: usize| {
        let data = (0..w * h * c).map(|_| r.random_range(-1.0..1.0)).collect();
        ImageBuffer::from_data(w, h, c, data).unwrap()
    };
    RenderUpstream {
        color: fill(3),
        features: fill(dc),
        depth: fill(1),
        alpha: fill(1),
    }
}

fn inner(out: &RenderOutput, up: &RenderUpstream) -> f64 {
    let dot = |a: &ImageBuffer, b: &ImageBuffer| -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    };
    dot(&out.color, &up.color)
        + dot(&out.features, &up.features)
        + dot(&out.depth, &up.depth)
        + dot(&out.alpha, &up.alpha)
}

/// Applies `delta` to one scalar parameter (`class`, `component`) of primitive `i`.
fn perturb(scene: &GaussianScene, i: usize, class: &str, k: usize, delta: f64) -> GaussianScene {
    let mut s = scene.clone();
    let p = &mut s.primitives[i];
    match class {
        "center" => p.center[k] += delta,
        "opacity_raw" => p.opacity_raw += delta,
        "color" => p.color[k] += delta,
        "scale_raw" => p.scale_raw[k] += delta,
        "rotation_raw" => p.rotation_raw[k] += delta,
        "sem_compressed" => p.sem_compressed.as_mut().unwrap()[k] += delta,
        _ => unreachable!(),
    }
    s.refresh_activations().unwrap();
    s
}

#[test]
fn backward_matches_central_differences() {
    let mut r = rng(11);
    let cam = camera(16);
    let h = 1e-4;
    let mut checked = 0;
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let scene = random_scene(&mut r, 4, 3, 2, 1.0);
        let up = random_upstream(&mut r, 16, 16, 2);
        let grads = render_backward(&scene, &cam, &up).unwrap();
        let base_stats = render(&scene, &cam).unwrap().stats;
        for i in 0..scene.len() {
            for (class, n) in [
                ("center", 3),
                ("opacity_raw", 1),
                ("color", 3),
                ("scale_raw", 3),
                ("rotation_raw", 4),
                ("sem_compressed", 2),
            ] {
                for k in 0..n {
                    let plus = render(&perturb(&scene, i, class, k, h), &cam).unwrap();
                    let minus = render(&perturb(&scene, i, class, k, -h), &cam).unwrap();
                    if plus.stats != base_stats || minus.stats != base_stats {
                        continue;
                    }
                    let numeric = (inner(&plus, &up) - inner(&minus, &up)) / (2.0 * h);
                    let g = &grads.primitives[i];
                    let analytic = match class {
                        "center" => g.center[k],
                        "opacity_raw" => g.opacity_raw,
                        "color" => g.color[k],
                        "scale_raw" => g.scale_raw[k],
                        "rotation_raw" => g.rotation_raw[k],
                        _ => g.sem_compressed[k],
                    };
                    let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                    worst = worst.max(err);
                    assert!(
                        close(analytic, numeric, 1e-4, 1e-7),
                        "{class}[{k}] of {i}: analytic {analytic} numeric {numeric}"
                    );
                    checked += 1;
                }
            }
        }
    }
    println!("checked {checked} components, worst relative error {worst:e}");
    assert!(checked > 1000);
}

/// Brute-force renderer: every splat at every pixel in global depth order.
fn oracle_render(scene: &GaussianScene, cam: &Camera) -> RenderOutput {
    use semsplat_core::gaussian::build_covariance;
    use semsplat_core::raster::project_gaussian;
    let dc = scene.compressed_dim;
    let mut splats: Vec<_> = scene
        .primitives
        .iter()
        .enumerate()
        .filter_map(|(i, p)| project_gaussian(p, &build_covariance(&p.scale, &p.rotation), cam, i))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));
    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput {
        color: ImageBuffer::zeros(w, h, 3),
        features: ImageBuffer::zeros(w, h, dc),
        depth: ImageBuffer::zeros(w, h, 1),
        alpha: ImageBuffer::zeros(w, h, 1),
        stats: Default::default(),
    };
    let min_power = -0.5 * SUPPORT_SIGMA * SUPPORT_SIGMA;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut t = 1.0;
            let mut depth = 0.0;
            for s in &splats {
                let (power, _, _) = s.power(x as f64, y as f64);
                if power < min_power || power > 0.0 {
                    continue;
                }
                let a = (s.opacity * power.exp()).min(ALPHA_CLAMP);
                if a < ALPHA_SKIP {
                    continue;
                }
                let next = t * (1.0 - a);
                if next < TRANSMITTANCE_STOP {
                    break;
                }
                let wgt = a * t;
                let prim = &scene.primitives[s.source_index];
                for c in 0..3 {
                    out.color.pixel_mut(p)[c] += wgt * prim.color[c];
                }
                for (o, v) in out
                    .features
                    .pixel_mut(p)
                    .iter_mut()
                    .zip(prim.sem_compressed.as_ref().unwrap())
                {
                    *o += wgt * v;
                }
                depth += wgt * s.depth;
                t = next;
            }
            out.depth.data[p] = depth;
            out.alpha.data[p] = 1.0 - t;
        }
    }
    out
}

#[test]
fn tiled_render_equals_brute_force_oracle() {
    let mut r = rng(5);
    let cam = camera(40);
    for _ in 0..5 {
        let scene = random_scene(&mut r, 24, 2, 2, 4.0);
        let tiled = render(&scene, &cam).unwrap();
        let oracle = oracle_render(&scene, &cam);
        assert_eq!(tiled.color, oracle.color);
        assert_eq!(tiled.features, oracle.features);
        assert_eq!(tiled.depth, oracle.depth);
        assert_eq!(tiled.alpha, oracle.alpha);
    }
}

#[test]
fn backward_is_identical_across_thread_counts() {
    let mut r = rng(31);
    let cam = camera(40);
    for _ in 0..4 {
        let scene = random_scene(&mut r, 48, 2, 2, 3.0);
        let up = random_upstream(&mut r, 40, 40, 2);
        let run = |n: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| render_backward(&scene, &cam, &up).unwrap())
        };
        let one = run(1);
        assert_eq!(one, run(4));
        assert_eq!(one, run(7));
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

    #[test]
    fn white_render_equals_alpha(seed in 0u64..10_000, count in 0usize..40) {
        let mut r = rng(seed);
        let mut scene = random_scene(&mut r, count, 1, 1, 5.0);
        for p in &mut scene.primitives {
            p.color = semsplat_core::scene::Vec3::repeat(1.0);
        }
        let out = render(&scene, &camera(24)).unwrap();
        for p in 0..out.alpha.pixel_count() {
            let a = out.alpha.data[p];
            proptest::prop_assert!((0.0..=1.0 - TRANSMITTANCE_STOP).contains(&a));
            for &c in out.color.pixel(p) {
                proptest::prop_assert!((c - a).abs() < 1e-10);
            }
            proptest::prop_assert!(out.depth.data[p] >= 0.0);
        }
    }
}
