mod common;

#[test]
fn each_layer_type_matches_finite_differences() {
    for (layer, err) in common::layer_gradient_errors(401) {
        assert!(err <= 1e-4, "{layer}: {err:e}");
    }
}

#[test]
fn composed_network_matches_finite_differences() {
    for seed in [402, 403] {
        let r = common::composed_gradient_check(seed);
        assert!(r.max_error <= 1e-4, "{r:?}");
        assert!(r.checked > 300 && r.kinks <= 5, "{r:?}");
    }
}
