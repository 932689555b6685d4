mod common;

use common::grad::{dense_model_loss, local_gate_sparsity_loss, op_suite};
use common::REL_TOL;

#[test]
fn every_op_matches_central_differences() {
    let results = op_suite();
    assert!(results.len() >= 28);
    for (name, err, n) in results {
        assert!(n >= 5, "{name}: only {n} shapes");
        assert!(err < REL_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn dense_model_loss_gradient() {
    let err = dense_model_loss();
    assert!(err < REL_TOL, "relative error {err:e}");
}

#[test]
fn local_gate_sparsity_gradient() {
    let err = local_gate_sparsity_loss();
    assert!(err < REL_TOL, "relative error {err:e}");
}
