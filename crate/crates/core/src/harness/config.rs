//! Experiment configuration (JSON).

use std::path::{Path, PathBuf};

use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::feedback::LawSpec;
use crate::linalg::CMatrix;
use crate::model::{DensityMatrix, ModelFile, ParameterSet, QndModel, SpectralStructure};

use super::scenarios;
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Full filter ρ̂ only.
    #[default]
    Full,
    /// Reduced filter q̂ alongside ρ̂; the law decides which one drives the control.
    Reduced,
    /// Same as `Reduced`, with the per-trajectory gap max|Tr(ρ̂P_n) − q̂_n| reported.
    Both,
}

/// Exactly one of `stock`, `path`, `inline`; parameter sets optionally override the source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stock: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<ModelFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<ParameterSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated: Option<ParameterSet>,
}

impl ModelConfig {
    pub fn stock(name: &str) -> Self {
        ModelConfig { stock: Some(name.to_string()), ..Default::default() }
    }

    /// Relative paths are resolved against `base`.
    pub fn build(&self, base: Option<&Path>) -> Result<QndModel, HarnessError> {
        let sources = self.stock.is_some() as u8 + self.path.is_some() as u8 + self.inline.is_some() as u8;
        if sources != 1 {
            return Err(HarnessError::Config("model needs exactly one of stock, path, inline".into()));
        }
        let mut file = if let Some(name) = &self.stock {
            scenarios::stock_model(name).ok_or_else(|| HarnessError::Config(format!("unknown stock model '{name}'")))?
        } else if let Some(p) = &self.path {
            let p = match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.clone(),
            };
            ModelFile::load(&p)?
        } else {
            self.inline.clone().unwrap()
        };
        if let Some(a) = &self.actual {
            file.actual = a.clone();
        }
        if let Some(e) = &self.estimated {
            file.estimated = e.clone();
        }
        Ok(file.build()?)
    }
}

/// Single-state specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    /// Diagonal in the lab basis.
    Diagonal(Vec<f64>),
    /// Σ_n w_n P_n / rank(P_n)
    Populations(Vec<f64>),
    MaximallyMixed,
    /// P_n / rank(P_n)
    Subspace(usize),
    /// Pure state from amplitudes [re, im].
    Pure(Vec<[f64; 2]>),
    /// Row-major entries [re, im].
    Matrix(Vec<[f64; 2]>),
    RandomPure,
    RandomInterior,
}

impl StateSpec {
    pub fn build<R: Rng + ?Sized>(
        &self,
        model: &QndModel,
        spectral: &SpectralStructure,
        rng: &mut R,
    ) -> Result<DensityMatrix, HarnessError> {
        let n = model.dim();
        let st = match self {
            StateSpec::Diagonal(w) => DensityMatrix::from_diagonal(w)?,
            StateSpec::Populations(w) => {
                if w.len() != spectral.num_subspaces() {
                    return Err(HarnessError::Config(format!("populations need {} entries", spectral.num_subspaces())));
                }
                mixture(spectral, w)?
            }
            StateSpec::MaximallyMixed => DensityMatrix::maximally_mixed(n),
            StateSpec::Subspace(s) => {
                spectral.check_target(*s)?;
                DensityMatrix::supported_on(&spectral.projections[*s])
            }
            StateSpec::Pure(a) => DensityMatrix::pure(&a.iter().map(|z| C64::new(z[0], z[1])).collect::<Vec<_>>())?,
            StateSpec::Matrix(e) => {
                if e.len() != n * n {
                    return Err(HarnessError::Config(format!("matrix state needs {} entries", n * n)));
                }
                DensityMatrix::new(CMatrix::from_fn(n, n, |i, j| C64::new(e[i * n + j][0], e[i * n + j][1])))?
            }
            StateSpec::RandomPure => DensityMatrix::random_pure(n, rng),
            StateSpec::RandomInterior => DensityMatrix::random_interior(n, rng),
        };
        if st.dim() != n {
            return Err(HarnessError::Config(format!("state dimension {} for a {n}-level model", st.dim())));
        }
        Ok(st)
    }
}

/// Σ_n w_n P_n / rank(P_n)
pub fn mixture(spectral: &SpectralStructure, w: &[f64]) -> Result<DensityMatrix, HarnessError> {
    let n = spectral.projections[0].nrows();
    let mut m = CMatrix::zeros(n, n);
    for (s, &x) in w.iter().enumerate() {
        m += &spectral.projections[s] * C64::new(x / spectral.rank(s) as f64, 0.0);
    }
    Ok(DensityMatrix::new(m)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStates {
    /// Same specification for every trajectory (random kinds draw per trajectory).
    Fixed { rho: StateSpec, rho_hat: StateSpec },
    /// Independent random interior states.
    RandomInterior,
    /// Independent random pure states.
    RandomBoundary,
    /// ρ(0) and ρ̂(0) at E_n(ρ) = E_n̄(ρ̂) = distance/2. `from` = n; when absent
    /// trajectories cycle through every n ≠ n̄.
    Escape {
        #[serde(default)]
        from: Option<usize>,
        distance: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default = "default_threshold")]
    pub tally_threshold: f64,
}

fn default_burn_in() -> f64 {
    0.2
}
fn default_floor() -> f64 {
    1e-10
}
fn default_threshold() -> f64 {
    1e-3
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            burn_in_fraction: default_burn_in(),
            floor: default_floor(),
            tally_threshold: default_threshold(),
        }
    }
}

/// Escape mode: trajectories stop at the first exit from the λ-ball
/// E_n(ρ) + E_n̄(ρ̂) < λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeConfig {
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Write the concatenated trajectory CSV.
    #[serde(default)]
    pub trajectories: bool,
    /// 0 quiet, 1 progress on stderr.
    #[serde(default)]
    pub verbosity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub model: ModelConfig,
    pub law: LawSpec,
    #[serde(default)]
    pub filter_mode: FilterMode,
    pub target: usize,
    pub dt: f64,
    pub horizon: f64,
    pub n_trajectories: usize,
    pub master_seed: u64,
    pub initial_states: InitialStates,
    /// Sampling period of the stored trajectory; defaults to 0.02.
    #[serde(default = "default_record")]
    pub record_interval: f64,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape: Option<EscapeConfig>,
    #[serde(default)]
    pub outputs: OutputConfig,
    /// User assertion that H4 holds for the chosen law.
    #[serde(default)]
    pub h4_asserted: bool,
}

fn default_record() -> f64 {
    0.02
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::MissingConfig(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if let (Some(p), Some(dir)) = (cfg.model.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hard errors, plus warnings (e.g. coarse dt) returned for the summary.
    pub fn validate(&self, model: &QndModel) -> Result<Vec<String>, HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if self.n_trajectories < 1 {
            return bad("n_trajectories must be at least 1");
        }
        if self.record_interval.is_nan() || self.record_interval <= 0.0 {
            return bad("record_interval must be positive");
        }
        if let Some(e) = &self.escape {
            if e.lambda.is_nan() || e.lambda < 0.0 {
                return bad("escape.lambda must be non-negative");
            }
        }
        let reduced_law = matches!(
            self.law.kind,
            crate::feedback::LawKind::SpecialReduced | crate::feedback::LawKind::GeneralReduced
        );
        if reduced_law && self.filter_mode == FilterMode::Full {
            return bad("reduced-filter laws need filter_mode reduced or both");
        }
        let mut warnings = Vec::new();
        let (a, e) = (model.actual(), model.estimated());
        let scale = a.gamma.iter().chain(&e.gamma).fold(a.omega.max(e.omega), |m, &g| m.max(g));
        if self.dt * scale > 0.01 {
            warnings.push(format!("dt·max(γ, γ̂, ω, ω̂) = {:.3e} exceeds 0.01", self.dt * scale));
        }
        Ok(warnings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_configs_round_trip_through_json() {
        for cfg in scenarios::all() {
            let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn model_needs_exactly_one_source() {
        assert!(ModelConfig::default().build(None).is_err());
        let both =
            ModelConfig { stock: Some("qubit".into()), inline: scenarios::stock_model("qubit"), ..Default::default() };
        assert!(both.build(None).is_err());
        assert!(ModelConfig::stock("qubit").build(None).is_ok());
        assert!(ModelConfig::stock("nope").build(None).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(scenarios::by_name("qubit-openloop").unwrap()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn coarse_dt_warns() {
        let mut cfg = scenarios::by_name("qubit-openloop").unwrap();
        let model = cfg.model.build(None).unwrap();
        assert!(cfg.validate(&model).unwrap().is_empty());
        cfg.dt = 0.05;
        assert_eq!(cfg.validate(&model).unwrap().len(), 1);
        cfg.n_trajectories = 0;
        assert!(cfg.validate(&model).is_err());
    }

    #[test]
    fn state_specs() {
        let model = ModelConfig::stock("spin32").build(None).unwrap();
        let s = crate::model::spectral_structure(&model).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let p = StateSpec::Populations(vec![0.1, 0.2, 0.3, 0.4]).build(&model, &s, &mut rng).unwrap();
        assert!((crate::analysis::populations(&p, &s)[3] - 0.4).abs() < 1e-14);
        assert!(StateSpec::Diagonal(vec![0.5, 0.5]).build(&model, &s, &mut rng).is_err());
        assert!(StateSpec::Subspace(9).build(&model, &s, &mut rng).is_err());
        let r = StateSpec::RandomPure.build(&model, &s, &mut rng).unwrap();
        assert!((r.purity() - 1.0).abs() < 1e-12);
    }
}
