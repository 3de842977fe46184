//! Exponent estimation on synthetic distance series d(t) = c·e^{−3t}·(noise).
//!
//! cargo run --example exponent_fit

use qnd_feedback::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let series: Vec<DistanceSeries> = (0..50)
        .map(|_| {
            let c: f64 = rng.random_range(0.1..1.0);
            let t: Vec<f64> = (0..=200).map(|i| i as f64 * 0.05).collect();
            let d = t.iter().map(|&t| c * (-3.0 * t).exp() * rng.random_range(0.8..1.25)).collect();
            DistanceSeries { t, d }
        })
        .collect();
    let est = estimate_exponent(&series, 1.0, 1e-12).expect("enough trajectories");
    println!(
        "fitted slope {:.4} ± {:.4} over {} trajectories (true −3)",
        est.slope, est.ci_halfwidth, est.trajectories
    );
}
