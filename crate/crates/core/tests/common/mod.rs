#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsplat_core::scene::{Camera, GaussianPrimitive, GaussianScene, Quat, Vec3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn camera(size: usize) -> Camera {
    let f = size as f64 * 1.2;
    Camera::look_at(
        Vec3::new(0.3, -0.2, -3.0),
        Vec3::zeros(),
        Vec3::new(0.0, -1.0, 0.0),
        f,
        f * 1.05,
        size,
        size,
    )
}

/// Random compressed scene around the origin, visible from [`camera`].
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    count: usize,
    sem_dim: usize,
    compressed_dim: usize,
    max_opacity_raw: f64,
) -> GaussianScene {
    let mut scene = GaussianScene::new(sem_dim, compressed_dim, 3.0);
    for _ in 0..count {
        let center = Vec3::from_fn(|_, _| rng.random_range(-0.7..0.7));
        let opacity_raw = rng.random_range(-1.5..max_opacity_raw);
        let color = Vec3::from_fn(|_, _| rng.random_range(0.0..1.0));
        let scale_raw = Vec3::from_fn(|_, _| rng.random_range(-3.0..-1.8));
        let rotation_raw = Quat::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let sem = (0..sem_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut p = GaussianPrimitive::from_raw(
            center,
            opacity_raw,
            color,
            scale_raw,
            rotation_raw,
            sem,
            scene.median_depth,
        )
        .unwrap();
        p.sem_compressed = Some((0..compressed_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        scene.primitives.push(p);
    }
    scene
}

/// `|a − n| ≤ rel · max(|a|, |n|) + abs`.
pub fn close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + abs
}
