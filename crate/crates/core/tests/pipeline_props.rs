//! Property tests over the image pipeline and classification invariants.

mod common;

use prn_core::imagepipe::{bicubic_resize, crop_patches, reassemble, ImagePlane};
use prn_core::prior::{classify, gradient_prior, DifficultyTag, Thresholds};
use prn_core::tensorops::Tensor;
use proptest::prelude::*;

fn arb_plane(max_dim: usize) -> impl Strategy<Value = ImagePlane> {
    (1..=max_dim, 1..=max_dim, any::<u64>()).prop_map(|(w, h, seed)| {
        let mut state = seed | 1;
        let data = (0..w * h)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) % 1000) as f32 / 1000.0
            })
            .collect();
        ImagePlane::new(w, h, data).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// crop -> reassemble at factor 1 is the identity for any plane size.
    #[test]
    fn crop_reassemble_round_trip(plane in arb_plane(300)) {
        let (grid, patches) = crop_patches(&plane, 54).unwrap();
        let back = reassemble(&grid, &patches, 1).unwrap();
        prop_assert_eq!(back, plane);
    }

    /// Every padded pixel is covered by exactly one patch.
    #[test]
    fn patch_grid_tiles_exactly(plane in arb_plane(200)) {
        let (grid, patches) = crop_patches(&plane, 32).unwrap();
        prop_assert_eq!(
            patches.len() * 32 * 32,
            grid.padded_width * grid.padded_height
        );
        let mut covered = vec![false; grid.padded_width * grid.padded_height];
        for &(r, c) in &grid.origins {
            for y in 0..32 {
                for x in 0..32 {
                    let idx = (r + y) * grid.padded_width + c + x;
                    prop_assert!(!covered[idx], "pixel covered twice");
                    covered[idx] = true;
                }
            }
        }
        prop_assert!(covered.into_iter().all(|v| v));
    }

    /// Bicubic resize of a constant plane is that constant at any size.
    #[test]
    fn bicubic_preserves_dc(
        w in 1usize..80,
        h in 1usize..80,
        ow in 1usize..120,
        oh in 1usize..120,
        level in 0u8..=255,
    ) {
        let c = level as f32 / 255.0;
        let plane = ImagePlane::new(w, h, vec![c; w * h]).unwrap();
        let out = bicubic_resize(&plane, ow, oh);
        for &v in out.data() {
            prop_assert!((v - c).abs() < 1e-5);
        }
    }

    /// classify is total and monotone under Mild < Moderate < Severe.
    #[test]
    fn classify_is_monotone(
        mut a in 0.0f32..500.0,
        mut b in 0.0f32..500.0,
        upper in 0.0f32..100.0,
        extra in 0.0f32..100.0,
    ) {
        let t = Thresholds::new(upper, upper + extra).unwrap();
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        prop_assert!(classify(a, &t) <= classify(b, &t));
    }

    /// The three tags partition any prior set: counts sum to the total.
    #[test]
    fn tags_partition_any_set(
        priors in proptest::collection::vec(0.0f32..200.0, 1..200),
        upper in 0.0f32..80.0,
        extra in 0.0f32..80.0,
    ) {
        let t = Thresholds::new(upper, upper + extra).unwrap();
        let mut counts = [0usize; 3];
        for &p in &priors {
            counts[classify(p, &t).index()] += 1;
        }
        prop_assert_eq!(counts.iter().sum::<usize>(), priors.len());
    }

    /// The prior ignores constant shifts and scales with contrast.
    #[test]
    fn prior_affine_behavior(seed in any::<u64>(), shift in -0.3f32..0.3, gain in 0.1f32..2.0) {
        let plane = common::texture_image(20, 20, seed);
        let base = plane.to_tensor();
        let shifted = Tensor::from_vec(
            1, 1, 20, 20,
            base.data().iter().map(|&v| v + shift).collect(),
        ).unwrap();
        let scaled = Tensor::from_vec(
            1, 1, 20, 20,
            base.data().iter().map(|&v| v * gain).collect(),
        ).unwrap();
        let p0 = gradient_prior(&base).unwrap();
        let p_shift = gradient_prior(&shifted).unwrap();
        let p_scale = gradient_prior(&scaled).unwrap();
        prop_assert!((p_shift - p0).abs() <= 1e-3 * p0.max(1.0));
        prop_assert!((p_scale - gain * p0).abs() <= 1e-3 * p0.max(1.0));
    }

    /// Tags of constant patches are always Mild regardless of level.
    #[test]
    fn constant_patches_are_mild(level in 0.0f32..1.0) {
        let t = Tensor::filled(1, 1, 18, 18, level);
        let p = gradient_prior(&t).unwrap();
        prop_assert_eq!(p, 0.0);
        prop_assert_eq!(classify(p, &Thresholds::default()), DifficultyTag::Mild);
    }
}
