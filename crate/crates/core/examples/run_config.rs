//! Load an experiment from a JSON config (as written by `qndfb scenarios
//! --out-dir`), run it and write summary.json / trajectories.csv.
//!
//! cargo run --release --example run_config -- crates/core/examples/configs/qubit_short.json /tmp/out

use std::path::PathBuf;

use qnd_feedback::harness::output::{write_summary, write_trajectory_file};
use qnd_feedback::prelude::*;

fn main() {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/qubit_short.json"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("qnd_run_config"));
    let cfg = match ExperimentConfig::load(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    };
    let r = run_batch(&cfg, RunOptions::default()).expect("batch runs");
    println!("summary      {}", write_summary(&r, &out).expect("write").display());
    println!("trajectories {}", write_trajectory_file(&r, &out).expect("write").display());
    println!("tally        {:?}", r.summary.tally.counts);
}
