//! Build a model from explicit matrices, detect its invariant subspaces,
//! save it as JSON and read it back.
//!
//! cargo run --example custom_model

use num_complex::Complex64 as C64;
use qnd_feedback::model::{diag, ModelFile};
use qnd_feedback::prelude::*;

fn main() {
    // Three levels, one channel; H₀ is degenerate on the first two levels but
    // the measurement separates them.
    let h0 = diag(&[1.0, 1.0, -2.0]);
    let l = diag(&[1.0, 0.0, -1.0]);
    let mut h1 = CMatrix::zeros(3, 3);
    for i in 0..2 {
        h1[(i, i + 1)] = C64::new(1.0, 0.0);
        h1[(i + 1, i)] = C64::new(1.0, 0.0);
    }
    let params = ParameterSet::uniform(1.0, 1.0, 0.8, 1);
    let model = build_model(h0, h1, vec![l], params.clone(), params).expect("valid QND model");
    let spectral = spectral_structure(&model).expect("QND model");
    println!(
        "{} subspaces, ranks {:?}",
        spectral.num_subspaces(),
        (0..spectral.num_subspaces()).map(|n| spectral.rank(n)).collect::<Vec<_>>()
    );
    println!("open-loop rate bound {:.3}", qsr_rate_bound(&model, &spectral));

    let dir = std::env::temp_dir().join("qnd_custom_model");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("three_level.json");
    model.to_file().save(&path).expect("save");
    let back = ModelFile::load(&path).expect("load").build().expect("rebuild");
    println!("round trip through {}: H₁ identical = {}", path.display(), back.h1() == model.h1());

    let report = check_parameter_domain(&model, &spectral, 1).expect("target");
    for (name, v) in report.verdicts() {
        println!("  {name:<24} {v}");
    }
}
