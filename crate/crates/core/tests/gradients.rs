//! Central-difference verification of every kernel, the composite block
//! pieces, and the full tiny model under each mixer.

use atnz_core::verify::{gradcheck_suite, GRAD_TOL};

#[test]
fn analytic_gradients_match_central_differences() {
    let reports = gradcheck_suite(11).expect("suite runs");
    // 7 kernels + block + merge + 2 lpi + 7 tiny models
    assert_eq!(reports.len(), 18);
    let mut failed = Vec::new();
    for r in &reports {
        println!("{r}");
        assert!(r.probes >= 64, "{}: only {} probes", r.name, r.probes);
        if !r.passes(GRAD_TOL) {
            failed.push(r.name.clone());
        }
    }
    assert!(failed.is_empty(), "gradient mismatches: {failed:?}");
}
