mod common;

use ir2qsm::net::NetworkConfig;

#[test]
fn every_tape_operation_matches_finite_differences() {
    for (name, err) in common::op_suite() {
        assert!(err < 1e-4, "{name}: max relative error {err:e}");
    }
}

#[test]
fn tiny_network_matches_finite_differences() {
    let (err, probed) = common::network_gradcheck(&NetworkConfig::tiny(2, 2), [8, 8, 8], 2, 6);
    assert!(probed > 100);
    assert!(err < 1e-3, "max relative error {err:e} over {probed} parameters");
}

#[test]
fn plain_variant_matches_finite_differences() {
    let cfg = NetworkConfig { reverse_concat: false, recurrent_module: false, ..NetworkConfig::tiny(2, 2) };
    let (err, _) = common::network_gradcheck(&cfg, [8, 8, 8], 2, 4);
    assert!(err < 1e-3, "max relative error {err:e}");
}
