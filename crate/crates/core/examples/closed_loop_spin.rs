//! Special feedback on the spin-3/2 model, steering every trajectory to the
//! middle subspace. Prints the tally, the exponent and a short trace of one
//! trajectory.
//!
//! cargo run --release --example closed_loop_spin [trajectories] [horizon]

use qnd_feedback::prelude::*;

fn main() {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let horizon: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(40.0);
    let mut cfg = scenarios::by_name("spin-special").expect("stock scenario");
    cfg.n_trajectories = n;
    cfg.horizon = horizon;
    let r = run_batch(&cfg, RunOptions::default()).expect("batch runs");
    let s = &r.summary;
    println!("target {}: {}/{} trajectories converged", s.target, s.tally.counts[s.target], s.tally.total);
    match (&s.exponent, &s.exponent_error) {
        (Some(e), _) => println!("exponent {:.3} ± {:.3}, bound {:?}", e.slope, e.ci_halfwidth, s.exponent_bound),
        (None, Some(err)) => println!("exponent n/a: {err}"),
        _ => {}
    }
    let tr = &r.trajectories[0];
    let stride = (tr.samples() / 10).max(1);
    println!("trajectory 0:      t   E_target(ρ)          u");
    for i in (0..tr.samples()).step_by(stride) {
        let (e, _) = tr.distances_at(i, s.target, false);
        println!("            {:8.2} {:13.3e} {:10.4}", tr.t[i], e, tr.u[i]);
    }
}
