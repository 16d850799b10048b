use nevlab::gradsuite::{run_suite, TOLERANCE};

#[test]
fn every_objective_matches_finite_differences() {
    let rows = run_suite(20, 0).unwrap();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!(r.max_rel_err <= TOLERANCE, "{} worst relative error {:e}", r.loss, r.max_rel_err);
    }
}
