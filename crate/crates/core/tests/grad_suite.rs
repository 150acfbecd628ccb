//! Runs the full finite-difference oracle over every primitive op and every
//! composite objective, 20 random instances each.

use adr_core::gradcheck::full_suite;

#[test]
fn every_op_and_objective_matches_finite_differences() {
    let checks = full_suite(20, 1e-5, 1e-4, 0xADC0FFEE).expect("suite construction");
    assert!(checks.len() >= 20, "expected full coverage, got {}", checks.len());
    for check in &checks {
        println!(
            "{:<24} instances={:<3} max_err={:.3e} tol={:.0e} {}",
            check.name,
            check.instances,
            check.max_err,
            check.tol,
            if check.passed { "ok" } else { "FAILED" }
        );
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "failed checks: {failed:?}");
}
