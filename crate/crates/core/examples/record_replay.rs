//! Simulate the actual state and its filter together, keep only the
//! measurement record, then rebuild the full and reduced filters from that
//! record alone.
//!
//! cargo run --release --example record_replay

use qnd_feedback::analysis::control_at;
use qnd_feedback::linalg::max_abs;
use qnd_feedback::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let model = ModelConfig::stock("spin32").build(None).expect("stock model");
    let spectral = spectral_structure(&model).expect("QND model");
    let law = FeedbackLaw::special_full(1, 1.25, 1.0);
    let (dt, steps): (f64, usize) = (1e-3, 5000);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rho0 = DensityMatrix::random_interior(model.dim(), &mut rng);
    let mut st = CoupledState::new(rho0, DensityMatrix::maximally_mixed(model.dim()), None, model.num_channels());

    let mut record = Vec::with_capacity(steps);
    for _ in 0..steps {
        let u = control_at(&st, &law, &spectral);
        let dw: Vec<f64> = (0..model.num_channels())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                dt.sqrt() * z
            })
            .collect();
        let next = step_coupled_ito(&st, &model, u, u, &dw, dt).expect("step");
        let dy: Vec<f64> = next.y.iter().zip(&st.y).map(|(a, b)| a - b).collect();
        record.push((u, dy));
        st = next;
    }

    let mut rho_hat = DensityMatrix::maximally_mixed(model.dim());
    let mut q = vec![1.0 / spectral.num_subspaces() as f64; spectral.num_subspaces()];
    for (u, dy) in &record {
        rho_hat = step_filter_from_record(&rho_hat, &model, *u, dy, dt).expect("filter step");
        q = step_reduced_filter(&q, &model, &spectral, dy, dt).expect("reduced step");
    }
    let gap = max_abs(&(rho_hat.matrix() - st.rho_hat.matrix()));
    println!("replayed filter vs simulated filter: max entry gap {gap:.2e}");
    println!("actual populations    {:?}", fmt(&populations(&st.rho, &spectral)));
    println!("filter populations    {:?}", fmt(&populations(&rho_hat, &spectral)));
    println!("reduced filter q̂      {:?}", fmt(&q));
}

fn fmt(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.4}")).collect()
}
