mod common;

use common::{loss_cases, primitive_cases, worst_error, TOLERANCE};

fn check(cases: Vec<common::Case>) {
    let mut failures = Vec::new();
    for case in &cases {
        let err = worst_error(case);
        if !(err < TOLERANCE) {
            failures.push(format!("{}: {err:e}", case.name));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn primitives_match_finite_differences() {
    check(primitive_cases());
}

#[test]
fn losses_match_finite_differences() {
    check(loss_cases());
}

#[test]
fn oracle_detects_a_wrong_gradient() {
    // sum(x * stop_grad(x)) has true derivative 2x but the tape reports x.
    let mut r = common::rng(3);
    let p = [common::uniform(&mut r, &[4], 0.5, 1.0)];
    let err = common::fd_error(&p, |p| p[0].mul(&p[0].detach()).unwrap().sum());
    assert!(err > 0.1, "{err}");
}
