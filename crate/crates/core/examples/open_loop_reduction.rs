//! Open-loop quantum state reduction on a qubit: the fraction of trajectories
//! collapsing onto each subspace against the initial populations, and the
//! fitted exponent against the closed-form bound.
//!
//! cargo run --release --example open_loop_reduction [trajectories]

use qnd_feedback::analysis::binomial_three_sigma;
use qnd_feedback::prelude::*;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let mut cfg = scenarios::by_name("qubit-openloop").expect("stock scenario");
    cfg.n_trajectories = n;
    let r = run_batch(&cfg, RunOptions::default()).expect("batch runs");
    let s = &r.summary;
    let p0 = 0.3;
    println!(
        "collapsed onto subspace 0: {:.3} (expected {p0} ± {:.3})",
        s.tally.fraction(0),
        binomial_three_sigma(p0, n)
    );
    println!("collapsed onto subspace 1: {:.3}", s.tally.fraction(1));
    println!("unresolved: {}", s.tally.unresolved);
    if let Some(e) = &s.exponent {
        println!("exponent {:.3} ± {:.3}, bound {:?}", e.slope, e.ci_halfwidth, s.exponent_bound);
    }
    println!("hard invariant violations: {}", s.hard_violations);
}
