//! Stock models and scenarios.

use num_complex::Complex64 as C64;

use crate::feedback::{LawKind, LawSpec};
use crate::linalg::CMatrix;
use crate::model::{build_model, pauli_x, pauli_z, spin_matrices, ModelFile, ParameterSet};

use super::config::{
    AnalysisConfig, EscapeConfig, ExperimentConfig, FilterMode, InitialStates, ModelConfig, OutputConfig, StateSpec,
};

pub const STOCK_MODELS: [&str; 3] = ["qubit", "spin32", "two-channel"];

/// Spin-3/2 measurement parameters: η·γ = 1.
pub const SPIN_GAMMA: f64 = 4.0;
pub const SPIN_ETA: f64 = 0.25;

pub fn stock_model(name: &str) -> Option<ModelFile> {
    let model = match name {
        "qubit" => {
            let p = ParameterSet::uniform(1.0, 1.0, 1.0, 1);
            build_model(pauli_z(), pauli_x(), vec![pauli_z()], p.clone(), p)
        }
        "spin32" => {
            let (jx, jz) = spin_matrices(3);
            let p = ParameterSet::uniform(1.0, SPIN_GAMMA, SPIN_ETA, 1);
            build_model(jz.clone(), jx, vec![jz], p.clone(), p)
        }
        "two-channel" => {
            let (jx, jz) = spin_matrices(3);
            let l2 = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
                C64::new(1.0, 0.5),
                C64::new(0.0, 0.0),
                C64::new(0.0, 0.0),
                C64::new(-1.0, 0.0),
            ]));
            let p = ParameterSet::new(1.0, vec![SPIN_GAMMA, 1.0], vec![SPIN_ETA, 0.5]);
            build_model(jz.clone(), jx, vec![jz, l2], p.clone(), p)
        }
        _ => return None,
    };
    Some(model.expect("stock models are valid").to_file())
}

/// Spin parameters with √(η̂γ̂)/√(ηγ) = ratio (γ̂ scaled, η̂ kept).
pub fn spin_estimated(ratio: f64) -> ParameterSet {
    ParameterSet::uniform(1.0, SPIN_GAMMA * ratio * ratio, SPIN_ETA, 1)
}

fn base(name: &str, description: &str, model: ModelConfig, law: LawSpec, target: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        description: description.to_string(),
        model,
        law,
        filter_mode: FilterMode::Full,
        target,
        dt: 1e-4,
        horizon: 80.0,
        n_trajectories: 200,
        master_seed: 20240601,
        initial_states: InitialStates::Fixed { rho: StateSpec::RandomInterior, rho_hat: StateSpec::MaximallyMixed },
        record_interval: 0.02,
        analysis: AnalysisConfig::default(),
        escape: None,
        outputs: OutputConfig::default(),
        h4_asserted: false,
    }
}

pub const SPIN_ALPHA: f64 = 1.25;
pub const SPIN_TARGET: usize = 1;

fn spin_special(name: &str, description: &str, ratio: f64, reduced: bool) -> ExperimentConfig {
    let mut model = ModelConfig::stock("spin32");
    if ratio != 1.0 {
        model.estimated = Some(spin_estimated(ratio));
    }
    let kind = if reduced { LawKind::SpecialReduced } else { LawKind::SpecialFull };
    let mut c = base(name, description, model, LawSpec::special(kind, SPIN_ALPHA, 1.0), SPIN_TARGET);
    c.h4_asserted = true;
    if reduced {
        c.filter_mode = FilterMode::Both;
    }
    c
}

fn two_channel_general(name: &str, description: &str, reduced: bool) -> ExperimentConfig {
    let kind = if reduced { LawKind::GeneralReduced } else { LawKind::GeneralFull };
    let mut c = base(
        name,
        description,
        ModelConfig::stock("two-channel"),
        LawSpec::general(kind, vec![3.0, 3.0], vec![1.0, 1.0]),
        1,
    );
    c.h4_asserted = true;
    if reduced {
        c.filter_mode = FilterMode::Both;
    }
    c
}

fn escape(
    name: &str,
    description: &str,
    model: ModelConfig,
    law: LawSpec,
    target: usize,
    from: Option<usize>,
) -> ExperimentConfig {
    let mut c = base(name, description, model, law, target);
    c.initial_states = InitialStates::Escape { from, distance: 0.05 };
    c.escape = Some(EscapeConfig { lambda: 0.2 });
    c.horizon = 50.0;
    c.record_interval = 0.01;
    c
}

/// Mismatch ratios of the escape-time sweep.
pub const SWEEP_RATIOS: [f64; 3] = [1.0, 1.1, 1.2];

pub fn escape_sweep(ratio: f64) -> ExperimentConfig {
    let mut model = ModelConfig::stock("spin32");
    model.estimated = Some(spin_estimated(ratio));
    let mut c = escape(
        &format!("escape-mismatch-{ratio:.1}"),
        "spin-3/2, general law, ρ near H_0 and ρ̂ near H_1; exit time against √(η̂γ̂)/√(ηγ)",
        model,
        LawSpec::general(LawKind::GeneralFull, vec![3.0], vec![1.0]),
        SPIN_TARGET,
        Some(0),
    );
    c.n_trajectories = 100;
    c
}

pub fn all() -> Vec<ExperimentConfig> {
    let mut qsr = base(
        "qubit-openloop",
        "qubit σz measurement, u = 0, ρ(0) = diag(0.3, 0.7): reduction statistics and rate",
        ModelConfig::stock("qubit"),
        LawSpec::open_loop(),
        0,
    );
    qsr.initial_states =
        InitialStates::Fixed { rho: StateSpec::Diagonal(vec![0.3, 0.7]), rho_hat: StateSpec::Diagonal(vec![0.3, 0.7]) };
    qsr.horizon = 15.0;
    qsr.n_trajectories = 2000;

    let mut qubit_mismatch = ModelConfig::stock("qubit");
    qubit_mismatch.estimated = Some(ParameterSet::uniform(1.0, 0.81, 1.0, 1));
    let mut escape_qubit = escape(
        "escape-qubit-s1",
        "qubit, special law, √(η̂γ̂) = 0.9√(ηγ): escape from a neighbourhood of H_1 × H_0",
        qubit_mismatch,
        LawSpec::special(LawKind::SpecialFull, 1.0, 1.0),
        0,
        Some(1),
    );
    escape_qubit.h4_asserted = true;

    let mut spin_mismatch = ModelConfig::stock("spin32");
    spin_mismatch.estimated = Some(spin_estimated(1.1));
    let mut escape_spin = escape(
        "escape-spin-g1",
        "spin-3/2, general law, ratio 1.1: escape from neighbourhoods of H_n × H_1, n ≠ 1",
        spin_mismatch,
        LawSpec::general(LawKind::GeneralFull, vec![3.0], vec![1.0]),
        SPIN_TARGET,
        None,
    );
    escape_spin.h4_asserted = true;

    let mut out = vec![
        qsr,
        spin_special("spin-special", "spin-3/2 Jz measurement, special law, matched parameters", 1.0, false),
        spin_special("spin-special-mismatch", "spin-3/2, special law, √(η̂γ̂)/√(ηγ) = 1.1", 1.1, false),
        two_channel_general("two-channel-general", "two measurement channels, general law", false),
        spin_special("spin-special-reduced", "spin-3/2, special law on the reduced filter", 1.0, true),
        two_channel_general("two-channel-general-reduced", "two channels, general law on the reduced filter", true),
        escape_qubit,
        escape_spin,
    ];
    out.extend(SWEEP_RATIOS.iter().map(|&r| escape_sweep(r)));
    out
}

pub fn by_name(name: &str) -> Option<ExperimentConfig> {
    all().into_iter().find(|c| c.name == name)
}
