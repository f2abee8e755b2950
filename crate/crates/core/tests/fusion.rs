use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsplat_core::fusion::{tokenize, AttentionScope, FusionConfig, FusionModel, TokenSet};
use semsplat_core::scene::{Camera, ImageBuffer};

fn random_tokens(r: &mut ChaCha8Rng, views: usize, per_view: usize, d_t: usize) -> TokenSet {
    let v = (0..views)
        .map(|_| (0..per_view).map(|_| (0..d_t).map(|_| r.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    TokenSet::new(v, d_t).unwrap()
}

#[test]
fn tokenize_matches_patch_matrix_product() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (w, h, c, p, d_t) = (12, 8, 2, 4, 5);
    let img = ImageBuffer::from_data(w, h, c, (0..w * h * c).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let proj = DMatrix::from_fn(d_t, p * p * c, |_, _| r.random_range(-1.0..1.0));
    let tokens = tokenize(&img, p, &proj).unwrap();
    assert_eq!(tokens.len(), (w / p) * (h / p));
    for (k, tok) in tokens.iter().enumerate() {
        let (tx, ty) = (k % (w / p), k / (w / p));
        let patch = DVector::from_fn(p * p * c, |i, _| {
            let (ch, px, py) = (i % c, (i / c) % p, i / (c * p));
            img.at(tx * p + px, ty * p + py, ch)
        });
        let expected = &proj * patch;
        for (a, b) in tok.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(tokenize(&img, 5, &proj).is_err());
}

#[test]
fn layers_alternate_scope() {
    assert_eq!(AttentionScope::of_layer(0), AttentionScope::IntraFrame);
    assert_eq!(AttentionScope::of_layer(1), AttentionScope::CrossFrame);
    assert_eq!(AttentionScope::of_layer(4), AttentionScope::IntraFrame);
}

#[test]
fn camera_token_follows_patches() {
    let model = FusionModel::new(FusionConfig::default(), 8, 8, 3, 0).unwrap();
    let img = ImageBuffer::zeros(8, 8, 3);
    let cam = Camera::identity(10.0, 10.0, 4.0, 4.0, 8, 8);
    let tokens = model.tokens(&[(&img, &cam), (&img, &cam)]).unwrap();
    assert_eq!(tokens.patches(), 4);
    assert_eq!(tokens.views[0].len(), 5);
    assert_eq!(tokens.views[0], tokens.views[1]);
}

#[test]
fn model_is_seeded() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let tokens = random_tokens(&mut r, 2, 5, 32);
    let fuse = |seed| FusionModel::new(FusionConfig::default(), 8, 8, 3, seed).unwrap().fuse(&tokens).unwrap();
    assert_eq!(fuse(1), fuse(1));
    assert_ne!(fuse(1), fuse(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fusion_is_permutation_equivariant(
        seed in 0u64..1000,
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let model = FusionModel::new(FusionConfig::default(), 8, 8, 3, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let tokens = random_tokens(&mut r, 3, 5, 32);
        let fused = model.fuse(&tokens).unwrap();
        let permuted = TokenSet::new(perm.iter().map(|&i| tokens.views[i].clone()).collect(), 32).unwrap();
        let out = model.fuse(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&out.views[k], &fused.views[i]);
        }
    }

    #[test]
    fn intra_layer_isolates_and_cross_layer_mixes(seed in 0u64..1000) {
        let model = FusionModel::new(FusionConfig::default(), 8, 8, 3, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let tokens = random_tokens(&mut r, 2, 5, 32);
        let mut moved = tokens.clone();
        moved.views[1][2][0] += 0.5;
        prop_assert_eq!(
            &model.apply_layer(0, &tokens).unwrap().views[0],
            &model.apply_layer(0, &moved).unwrap().views[0]
        );
        prop_assert_ne!(
            &model.apply_layer(1, &tokens).unwrap().views[0],
            &model.apply_layer(1, &moved).unwrap().views[0]
        );
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, views in 1usize..4) {
        let model = FusionModel::new(FusionConfig::default(), 8, 8, 3, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (_, traces) = model.fuse_traced(&random_tokens(&mut r, views, 5, 32)).unwrap();
        for row in traces.iter().flat_map(|t| t.groups.iter().flatten().flatten()) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn single_view_is_plain_self_attention() {
    let model = FusionModel::new(FusionConfig { layers: 3, ..FusionConfig::default() }, 8, 8, 3, 7).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let tokens = random_tokens(&mut r, 1, 5, 32);
    assert_eq!(model.fuse(&tokens).unwrap().views[0], model.self_attention_stack(&tokens.views[0]));
}

#[test]
fn full_scale_configuration() {
    let cfg = FusionConfig::full_scale();
    assert_eq!((cfg.layers, cfg.patch, cfg.d_t), (24, 16, 1024));
    assert!(cfg.validate().is_ok());
    assert!(FusionConfig { heads: 3, ..FusionConfig::default() }.validate().is_err());
}
