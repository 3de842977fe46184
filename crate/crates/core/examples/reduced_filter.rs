//! The reduced diagonal filter q̂ next to the full filter ρ̂ on one record:
//! open loop they agree on the populations; under feedback the control
//! rotates ρ̂ but q̂ never sees it, and the gap max|Tr(ρ̂P_n) − q̂_n| grows.
//!
//! cargo run --release --example reduced_filter

use qnd_feedback::prelude::*;

fn main() {
    for name in ["spin-special", "spin-special-reduced"] {
        let mut cfg = scenarios::by_name(name).expect("stock scenario");
        cfg.filter_mode = FilterMode::Both;
        cfg.n_trajectories = 4;
        cfg.horizon = 10.0;
        if cfg.law.kind == LawKind::SpecialFull {
            // Open loop on the same model.
            cfg.law = LawSpec::open_loop();
        }
        let r = run_batch(&cfg, RunOptions::default()).expect("batch runs");
        println!("{:?}: filter gap per trajectory", cfg.law.kind);
        for tr in &r.trajectories {
            let last = tr.samples() - 1;
            let q: Vec<String> = tr.q_hat_at(last).unwrap_or(&[]).iter().map(|x| format!("{x:.3}")).collect();
            println!("  #{}: max gap {:.2e}, terminal q̂ {:?}", tr.id, tr.filter_gap_max.unwrap_or(f64::NAN), q);
        }
    }
}
