mod common;

#[test]
fn every_operation_matches_finite_differences() {
    let cases = common::gradient_suite();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}: {:.3e} (tolerance {:.0e})", c.name, c.max_rel, c.tol))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
