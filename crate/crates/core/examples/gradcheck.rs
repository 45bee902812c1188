//! Finite-difference check of every differentiable operation and of a
//! 2-layer, width-16 model loss, in f64.

use avdit::checks::{model_case, op_cases, run_cases, EPS, TOL};

fn main() {
    let mut cases = op_cases(0);
    cases.push(model_case(16, 2, 0).expect("tiny model"));
    println!("eps {EPS:e}, tolerance {TOL:e}");
    let mut failed = 0;
    for (name, result) in run_cases(&cases) {
        let report = result.expect("check runs");
        if !report.passed {
            failed += 1;
        }
        println!("{name:<20} max rel error {:.2e}  {}", report.max_rel_error, if report.passed { "ok" } else { "FAIL" });
    }
    assert_eq!(failed, 0, "{failed} gradient checks failed");
}
