use dualenc::gradcheck::{loss_gradient_suite, LOSS_NAMES};

#[test]
fn every_loss_matches_finite_differences() {
    let reports = loss_gradient_suite(20, 11).unwrap();
    assert_eq!(reports.len(), LOSS_NAMES.len());
    for r in &reports {
        println!("{:<16} configs={} max_rel_error={:.3e}", r.loss, r.configs, r.max_rel_error);
    }
    for r in &reports {
        assert!(r.max_rel_error <= 1e-4, "{}: {:.3e}", r.loss, r.max_rel_error);
    }
}
