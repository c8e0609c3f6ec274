use paraformer::gradcheck::{run_op_suite, GradCheckConfig};

#[test]
fn every_op_matches_finite_differences() {
    let cfg = GradCheckConfig::default();
    let results = run_op_suite(42, &cfg).unwrap();
    let mut failures = Vec::new();
    for r in &results {
        if !r.report.pass {
            failures.push(format!("{}[{}]: {:.3e}", r.name, r.shape_index, r.report.max_rel_err));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
    // three shapes per op
    let names: std::collections::BTreeSet<_> = results.iter().map(|r| r.name).collect();
    for n in names {
        assert!(results.iter().filter(|r| r.name == n).count() >= 3);
    }
}
