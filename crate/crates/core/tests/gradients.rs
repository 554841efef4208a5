//! Finite-difference checks for every differentiable tensor operation.

use camradar_core::fusion::selfcheck::check_op_gradients;

#[test]
fn every_op_matches_central_differences() {
    let reports = check_op_gradients(1e-5).unwrap();
    assert!(reports.len() >= 18);
    for (name, r) in &reports {
        assert!(r.passes(1e-5), "{name}: {r:?}");
    }
}
