//! Rate constants and hypothesis verdicts for every target of the spin-3/2
//! model, at matched and mismatched estimated parameters.
//!
//! cargo run --release --example check_conditions

use qnd_feedback::harness::scenarios::spin_estimated;
use qnd_feedback::prelude::*;

fn main() {
    let base = ModelConfig::stock("spin32").build(None).expect("stock model");
    for ratio in [1.0, 1.1] {
        let model = base.with_estimated(spin_estimated(ratio)).expect("valid parameters");
        let spectral = spectral_structure(&model).expect("QND model");
        println!("ratio √(η̂γ̂)/√(ηγ) = {ratio}");
        for target in 0..spectral.num_subspaces() {
            let report = check_parameter_domain(&model, &spectral, target).expect("target in range");
            let rc = &report.rate_constants;
            let failed: Vec<&str> = report.verdicts().into_iter().filter(|(_, v)| !v).map(|(k, _)| k).collect();
            println!(
                "  target {target}: C = {:.4}, K = {:.4}, D = {:.4}, exponent bound {:.4}, failing: {:?}",
                rc.big_c, rc.big_k, rc.d_nbar, report.exponent_bound, failed
            );
        }
    }
}
