//! A user-supplied feedback law on the filter populations, stepped by hand
//! with the allocation-free stepper. The law here is a bang-bang variant of
//! the special law; the H4 probe reports whether its zero set traps the filter.
//!
//! cargo run --release --example custom_law

use std::sync::Arc;

use qnd_feedback::conditions::probe_h4;
use qnd_feedback::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let model = ModelConfig::stock("spin32").build(None).expect("stock model");
    let spectral = spectral_structure(&model).expect("QND model");
    let target = 1;
    let law = FeedbackLaw::custom(
        target,
        false,
        Arc::new(move |p: &[f64]| if p[target] < 0.9 { 1.5 } else { 1.5 * (1.0 - p[target]) }),
    );

    let probe = probe_h4(&model, &spectral, &law, 50, 2.0, 1);
    println!(
        "H4 probe: {} zero points, {} stuck, falsified = {}",
        probe.zero_points, probe.stuck_points, probe.falsified
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dt: f64 = 1e-4;
    let mut stepper = FrameStepper::new(&model);
    let rho0 = DensityMatrix::random_interior(model.dim(), &mut rng);
    let st = CoupledState::new(rho0, DensityMatrix::maximally_mixed(model.dim()), None, model.num_channels());
    let mut fs = stepper.frame_state(&st);
    let mut audit = InvariantAudit::default();
    let mut dw = vec![0.0; model.num_channels()];
    for step in 0..=200_000 {
        let lab = stepper.lab_state(&fs);
        let ph = populations(&lab.rho_hat, &spectral);
        if step % 40_000 == 0 {
            println!(
                "t = {:5.1}  E_target(ρ) = {:.3e}",
                step as f64 * dt,
                distance_e(&lab.rho, &spectral.projections[target])
            );
        }
        let (u, _) = law.evaluate(&ph, &spectral);
        for x in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = dt.sqrt() * z;
        }
        stepper.step_coupled(&mut fs, u, u, &dw, dt, &mut audit).expect("step");
    }
    println!("clip events {}, hard violations {}", audit.clip_events, audit.hard_violations());
}
