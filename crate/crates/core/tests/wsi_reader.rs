mod common;

use histotile_core::wsi::writer::{encode_pyramid, pyramid_levels};
use histotile_core::wsi::{open_slide_bytes, WsiError};
use proptest::prelude::*;

#[test]
fn every_layout_round_trips_exactly() {
    let r = common::reader_round_trip(101, 2);
    assert_eq!(r.exact, r.fixtures, "{:?}", r.failures);
    assert_eq!(r.fixtures, 16);
}

#[test]
fn windows_match_direct_crops() {
    assert_eq!(common::crop_mismatches(102, 60), 0);
}

#[test]
fn mutated_files_never_panic() {
    let r = common::fuzz_reader(103, 3000);
    assert_eq!(r.panics, 0);
    assert!(r.opened > 0 && r.opened < r.runs, "{r:?}");
}

#[test]
fn truncated_files_error_cleanly() {
    let mut rng = common::rng(104);
    let levels = pyramid_levels(&common::random_image(&mut rng, 64, 48), 2);
    let bytes = encode_pyramid(&levels, common::DESCRIPTION, &common::all_layouts(16)[0]).unwrap();
    for cut in [0, 1, 4, 7, 8, bytes.len() / 2, bytes.len() - 1] {
        let result = open_slide_bytes(bytes[..cut].to_vec(), "cut", None)
            .and_then(|s| s.read_region(0, 0, 0, 64, 48).map(|_| ()));
        assert!(result.is_err(), "cut at {cut} was accepted");
    }
    assert!(matches!(open_slide_bytes(b"XX*\0\x08\0\0\0".to_vec(), "m", None), Err(WsiError::UnknownMagic)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn out_of_bounds_regions_are_refused(x in 0usize..200, y in 0usize..200, w in 0usize..100, h in 0usize..100) {
        let mut rng = common::rng(105);
        let levels = pyramid_levels(&common::random_image(&mut rng, 90, 60), 1);
        let slide = open_slide_bytes(
            encode_pyramid(&levels, common::DESCRIPTION, &common::all_layouts(16)[3]).unwrap(),
            "bounds",
            None,
        )
        .unwrap();
        let inside = w > 0 && h > 0 && x + w <= 90 && y + h <= 60;
        let got = slide.read_region(0, x, y, w, h);
        prop_assert_eq!(got.is_ok(), inside);
        if let Ok(region) = got {
            prop_assert_eq!(region.into_image(), levels[0].crop(x, y, w, h));
        }
    }
}
