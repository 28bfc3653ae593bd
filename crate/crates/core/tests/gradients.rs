use std::time::{Duration, Instant};

use trajmamba::gradsuite::{run, TRIALS};

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let start = Instant::now();
    let checks = run(TRIALS, 11).unwrap();
    let elapsed = start.elapsed();
    for c in &checks {
        println!("{:<20} trials={} max_rel={:.2e}", c.op, c.trials, c.max_rel);
    }
    let bad: Vec<_> = checks.iter().filter(|c| !(c.max_rel <= 1e-4)).collect();
    assert!(bad.is_empty(), "{bad:?}");
    assert!(checks.iter().all(|c| c.trials >= 20));
    assert!(elapsed < Duration::from_secs(120), "{elapsed:?}");
}
