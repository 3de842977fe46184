//! The deterministic support system: replace the noise by a bounded control
//! v(t) and integrate the coupled Stratonovich vector field with RK4. Here a
//! constant v pushes the populations of ρ and ρ̂ towards the subspace whose
//! measurement eigenvalue matches v.
//!
//! cargo run --example support_system

use qnd_feedback::dynamics::step_deterministic_control;
use qnd_feedback::prelude::*;

fn main() {
    let model = ModelConfig::stock("qubit").build(None).expect("stock model");
    let spectral = spectral_structure(&model).expect("QND model");
    let dt = 1e-3;
    for v in [2.0, -2.0, 0.0] {
        // Subspaces already collapsed onto are invariant, so each v starts afresh.
        let mut rho = DensityMatrix::from_diagonal(&[0.5, 0.5]).expect("state");
        let mut rho_hat = DensityMatrix::from_diagonal(&[0.4, 0.6]).expect("state");
        for step in 0..=3000 {
            if step % 1000 == 0 {
                println!(
                    "v = {v:+}: t = {:.1}  ρ pops {:?}  ρ̂ pops {:?}",
                    step as f64 * dt,
                    pops(&rho, &spectral),
                    pops(&rho_hat, &spectral)
                );
            }
            (rho, rho_hat) = step_deterministic_control(&rho, &rho_hat, &model, 0.0, &[v], dt).expect("step");
        }
    }
}

fn pops(rho: &DensityMatrix, s: &SpectralStructure) -> Vec<String> {
    populations(rho, s).iter().map(|x| format!("{x:.4}")).collect()
}
