mod support;

use support::grad_cases::{cases, run_case};

#[test]
fn every_operation_passes_finite_differences() {
    let mut failures = Vec::new();
    for case in cases() {
        match run_case(&case) {
            Ok(r) if r.passed() => eprintln!("{:<28} {:.2e}", case.0, r.max_rel_error),
            Ok(r) => failures.push(format!("{}: {r:?}", case.0)),
            Err(e) => failures.push(format!("{}: {e}", case.0)),
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
