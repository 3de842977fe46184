//! E_s(ρ) = 1 − Tr(ρP_s) bounds the trace distance to the subspace from both
//! sides: E² ≤ ‖ρ − P_sρP_s‖₁ ≤ 3N·E. Checked here on random states.
//!
//! cargo run --example norm_sandwich

use qnd_feedback::linalg::random_unitary;
use qnd_feedback::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [2, 3, 4, 6] {
        let mut worst_low = f64::INFINITY;
        let mut worst_high = f64::INFINITY;
        for _ in 0..2000 {
            let rho = if rng.random_bool(0.5) {
                DensityMatrix::random_pure(n, &mut rng)
            } else {
                DensityMatrix::random_interior(n, &mut rng)
            };
            let rank = rng.random_range(1..n);
            let u = random_unitary(n, &mut rng);
            let cols = u.columns(0, rank);
            let p = cols * cols.adjoint();
            let c = norm_sandwich_check(&rho, &p);
            assert!(c.ok);
            worst_low = worst_low.min(c.mid - c.lhs);
            worst_high = worst_high.min(c.rhs - c.mid);
        }
        println!("N = {n}: min(‖·‖₁ − E²) = {worst_low:.3e}, min(3N·E − ‖·‖₁) = {worst_high:.3e}");
    }
}
