//! Closed-form generator of population functionals against a brute-force
//! Monte Carlo estimate from single Itô steps, at random coupled states of the
//! spin-3/2 model under the special law.
//!
//! cargo run --release --example generator_oracle

use qnd_feedback::analysis::{control_at, random_coupled_state};
use qnd_feedback::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let model = ModelConfig::stock("spin32").build(None).expect("stock model");
    let spectral = spectral_structure(&model).expect("QND model");
    let law = FeedbackLaw::special_full(1, 1.25, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dt = 1e-3;
    for i in 0..5 {
        let st = random_coupled_state(model.dim(), 0.3, model.num_channels(), &mut rng);
        let u = control_at(&st, &law, &spectral);
        for g in [
            PopulationFunctional::ActualWeight(0),
            PopulationFunctional::FilterWeight(1),
            PopulationFunctional::CoupledLyapunov(1),
        ] {
            let exact = generator_analytic(&st, &model, &spectral, u, g);
            let mc = generator_mc_oracle(&st, &model, &spectral, &law, &|p, ph| g.value(p, ph), dt, 20_000, i)
                .expect("step ok");
            println!("state {i} {g:?}: analytic {exact:+.5}, Monte Carlo {:+.5} ± {:.5}", mc.estimate, mc.stderr);
        }
    }
}
