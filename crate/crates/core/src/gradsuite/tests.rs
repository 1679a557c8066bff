use super::*;

fn assert_all_pass(results: &[CheckResult]) {
    assert!(!results.is_empty());
    for r in results {
        assert!(r.passed(), "{} / {}: {:?}", r.module, r.name, r.report);
        assert!(r.pooled == (r.module == "network"));
        assert!(
            r.report.entries_checked > 0,
            "{} / {} checked nothing",
            r.module,
            r.name
        );
    }
}

#[test]
fn every_op_and_block_passes() {
    for m in MODULES.iter().filter(|m| **m != "network") {
        let r = run(Some(m)).unwrap();
        assert!(r.iter().all(|c| c.module == *m));
        assert_all_pass(&r);
    }
}

#[test]
fn end_to_end_loss_passes() {
    let r = run(Some("network")).unwrap();
    assert_eq!(r.len(), NETWORK_GROUPS.len());
    assert_all_pass(&r);
}

#[test]
fn unknown_module_is_rejected() {
    assert!(matches!(run(Some("nope")), Err(Error::Config(_))));
}

#[test]
fn tensor_suite_covers_every_op() {
    let names: Vec<String> = run(Some("tensor")).unwrap().into_iter().map(|r| r.name).collect();
    for op in [
        "linear",
        "linear_rows",
        "matmul",
        "add",
        "sub",
        "mul",
        "lerp",
        "mul_scalar",
        "mul_const",
        "affine",
        "relu",
        "sigmoid",
        "exp",
        "abs",
        "sqrt",
        "square",
        "recip",
        "gather",
        "weighted_gather",
        "concat",
        "slice_cols",
        "reshape",
        "transpose",
        "group_softmax",
        "sum_axis",
        "group_sum",
        "row_sum",
        "group_max",
        "sum_all",
        "expand_cols",
        "quat_mul",
        "quat_to_rot",
    ] {
        assert!(names.iter().any(|n| n == op), "missing {op}");
    }
}
