mod common;

use common::gradcheck::{gradient_suite, TOLERANCE};

#[test]
fn every_primitive_matches_finite_differences() {
    let reports = gradient_suite(100, 7);
    for r in &reports {
        println!("{:<22} worst {:.2e} over {} graphs", r.name, r.worst, r.graphs);
    }
    let bad: Vec<_> = reports.iter().filter(|r| r.failures > 0).collect();
    assert!(bad.is_empty(), "relative error >= {TOLERANCE}: {bad:?}");
}
