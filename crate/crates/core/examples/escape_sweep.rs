//! Exit times from a neighbourhood of a wrong subspace pair as the estimated
//! measurement strength drifts away from the true one.
//!
//! cargo run --release --example escape_sweep [trajectories]

use qnd_feedback::harness::scenarios::{escape_sweep, SWEEP_RATIOS};
use qnd_feedback::prelude::*;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    println!("ratio  exited  mean exit  median  max");
    for ratio in SWEEP_RATIOS {
        let mut cfg = escape_sweep(ratio);
        cfg.n_trajectories = n;
        let r = run_batch(&cfg, RunOptions::default()).expect("batch runs");
        let e = r.summary.escape.as_ref().expect("escape scenario");
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!("{ratio:5.2}  {:>3}/{:<3} {:>9} {:>7} {:>6}", e.exited, e.total, f(e.mean), f(e.median), f(e.max));
        if r.summary.conditions_flagged {
            println!("       (some hypothesis fails at this ratio)");
        }
    }
}
