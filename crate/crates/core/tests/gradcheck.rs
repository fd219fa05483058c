use fdnet_core::gradcheck::{run_check, OPS, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    for op in OPS.iter().filter(|op| **op != "fdnet") {
        let r = run_check(op, 7).unwrap();
        assert!(r.max_rel_error < TOLERANCE, "{}: {:.3e}", op, r.max_rel_error);
    }
}

#[test]
fn toy_network_parameters_match_finite_differences() {
    let r = run_check("fdnet", 11).unwrap();
    assert!(r.max_rel_error < TOLERANCE, "fdnet: {:.3e}", r.max_rel_error);
}

#[test]
fn unknown_op_is_rejected() {
    assert!(run_check("gelu", 0).is_err());
}
