use thinkact::tensor::gradcheck::{check_all, check_primitive, relative_error, PRIMITIVES};

#[test]
fn every_primitive_matches_finite_differences() {
    let reports = check_all(100, 2024).unwrap();
    assert_eq!(reports.len(), PRIMITIVES.len());
    for r in &reports {
        assert_eq!(r.instances, 100);
        assert!(r.max_rel_error < 1e-4, "{}: {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn checks_are_seeded() {
    let a = check_primitive("layer_norm", 5, 3).unwrap();
    let b = check_primitive("layer_norm", 5, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn relative_error_uses_floor() {
    assert_eq!(relative_error(2.0, 1.0), 0.5);
    assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
}
