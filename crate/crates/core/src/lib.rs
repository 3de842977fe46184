//! Feedback stabilization of N-level quantum systems under continuous
//! quantum non-demolition (QND) measurement.
//!
//! * [`model`]: QND models, invariant subspaces, density matrices.
//! * [`conditions`]: rate constants and the hypothesis checks for a target subspace.
//! * [`dynamics`]: the coupled stochastic master equation / filter stepper, the
//!   reduced diagonal filter and the deterministic support system.
//! * [`feedback`]: open-loop, special and general control laws.
//! * [`analysis`]: distances, Lyapunov functions, generator oracles, exponent fits.
//! * [`harness`]: experiment configs, stock scenarios, batches and the `qndfb` CLI.
//!
//! Indices (targets, channels, subspaces) are 0-based.
//!
//! ```
//! use qnd_feedback::prelude::*;
//!
//! let model = ModelConfig::stock("qubit").build(None).unwrap();
//! let spectral = spectral_structure(&model).unwrap();
//! assert_eq!(spectral.num_subspaces(), 2);
//! let bound = qsr_rate_bound(&model, &spectral);
//! assert!((bound + 2.0).abs() < 1e-12);
//! ```

#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod conditions;
pub mod dynamics;
pub mod feedback;
pub mod harness;
pub mod linalg;
pub mod model;

/// The types and functions most examples need.
pub mod prelude {
    pub use crate::analysis::{
        distance_e, estimate_exponent, generator_analytic, generator_mc_oracle, lyapunov_v, norm_sandwich_check,
        populations, qsr_rate_bound, DistanceSeries, PopulationFunctional,
    };
    pub use crate::conditions::{check_parameter_domain, rate_constants, ConditionReport};
    pub use crate::dynamics::{
        step_coupled_ito, step_filter_from_record, step_reduced_filter, CoupledState, FrameStepper, InvariantAudit,
    };
    pub use crate::feedback::{FeedbackLaw, LawKind, LawSpec};
    pub use crate::harness::{
        run_batch, scenarios, ExperimentConfig, ExperimentResult, FilterMode, ModelConfig, RunOptions,
    };
    pub use crate::linalg::CMatrix;
    pub use crate::model::{build_model, spectral_structure, DensityMatrix, ParameterSet, QndModel, SpectralStructure};
}
