mod common;

use histotile_core::stain::{estimate_stain_matrix, StainProfile, DEFAULT_ALPHA, DEFAULT_BETA};
use proptest::prelude::*;

#[test]
fn recovers_generator_stains() {
    let r = common::stain_oracle(301, 50);
    assert_eq!(r.failed_estimates, 0);
    assert!(r.max_angle <= 0.02, "{r:?}");
    assert!(r.max_self_change <= 2.0, "{r:?}");
}

#[test]
fn estimate_is_order_invariant() {
    let mut rng = common::rng(302);
    let case = common::two_stain_image(&mut rng, 2000);
    let a = estimate_stain_matrix(&case.pixels, DEFAULT_BETA, DEFAULT_ALPHA).unwrap();
    let mut reversed: Vec<u8> = case.pixels.chunks_exact(3).rev().flatten().copied().collect();
    let b = estimate_stain_matrix(&reversed, DEFAULT_BETA, DEFAULT_ALPHA).unwrap();
    for s in 0..2 {
        for c in 0..3 {
            assert!((a.column(s)[c] - b.column(s)[c]).abs() < 1e-12);
        }
    }
    reversed.truncate(3);
    assert!(estimate_stain_matrix(&reversed, DEFAULT_BETA, DEFAULT_ALPHA).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn estimates_are_valid_profiles(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let case = common::two_stain_image(&mut rng, 1500);
        let p = estimate_stain_matrix(&case.pixels, DEFAULT_BETA, DEFAULT_ALPHA).unwrap();
        prop_assert!(p.validate().is_ok());
        // hematoxylin carries the larger red optical density
        prop_assert!(p.column(0)[0] >= p.column(1)[0]);
        let text = p.to_text();
        prop_assert_eq!(StainProfile::from_text(&text).unwrap().to_text(), text);
    }
}
