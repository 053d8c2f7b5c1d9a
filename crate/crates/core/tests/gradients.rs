mod common;

use common::{model_gradient_error, op_gradient_suite};

const TOLERANCE: f64 = 1e-3;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for seed in 0..3 {
        for (name, err) in op_gradient_suite(seed) {
            if !(err < TOLERANCE) {
                failures.push(format!("{name} (seed {seed}): {err:e}"));
            }
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn model_matches_central_differences() {
    let err = model_gradient_error(11);
    assert!(err < TOLERANCE, "end-to-end relative error {err:e}");
}
