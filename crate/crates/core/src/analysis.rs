//! Distance and Lyapunov functionals, infinitesimal-generator evaluation
//! (closed form and Monte Carlo), exponent and convergence estimators, and
//! escape-time statistics.

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{CoupledState, DynamicsError, FrameStepper, InvariantAudit};
use crate::feedback::FeedbackLaw;
use crate::linalg::{self, CMatrix};
use crate::model::{DensityMatrix, QndModel, SpectralStructure};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("need at least {needed} trajectories, got {got}")]
    TooFewTrajectories { needed: usize, got: usize },
    #[error("only {decayed} of {total} trajectories decay below 10·floor")]
    InsufficientDecay { decayed: usize, total: usize },
    #[error("floor must be positive")]
    BadFloor,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

pub const MIN_TRAJECTORIES: usize = 30;

/// E_s(ρ) = √(1 − Tr(ρP_s)), computed as √Tr(ρ(I − P_s)) to keep precision near the subspace.
pub fn distance_e(rho: &DensityMatrix, p: &CMatrix) -> f64 {
    let n = rho.dim();
    let q = CMatrix::identity(n, n) - p;
    (rho.matrix() * q).trace().re.clamp(0.0, 1.0).sqrt()
}

/// E_n from populations: √Σ_{j≠n} p_j.
pub fn distance_from_pops(pops: &[f64], n: usize) -> f64 {
    crate::feedback::complement(pops, n).clamp(0.0, 1.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormSandwich {
    /// E_s²
    pub lhs: f64,
    /// ‖ρ − P_sρP_s‖₁
    pub mid: f64,
    /// 3N·E_s
    pub rhs: f64,
    pub ok: bool,
}

pub fn norm_sandwich_check(rho: &DensityMatrix, p: &CMatrix) -> NormSandwich {
    let e = distance_e(rho, p);
    let r = rho.matrix();
    let mid = linalg::trace_norm_hermitian(&(r - p * r * p));
    let lhs = e * e;
    let rhs = 3.0 * rho.dim() as f64 * e;
    NormSandwich { lhs, mid, rhs, ok: lhs <= mid + 1e-12 && mid <= rhs + 1e-12 }
}

/// V_n̄(ρ) = Σ_{n≠n̄} √Tr(ρP_n)
pub fn lyapunov_v(rho: &DensityMatrix, spectral: &SpectralStructure, target: usize) -> f64 {
    lyapunov_v_pops(&populations(rho, spectral), target)
}

pub fn lyapunov_v_pops(pops: &[f64], target: usize) -> f64 {
    pops.iter().enumerate().filter(|(n, _)| *n != target).map(|(_, p)| p.max(0.0).sqrt()).sum()
}

/// V_n̄(ρ) + V_n̄(ρ̂)
pub fn lyapunov_v_coupled(
    rho: &DensityMatrix,
    rho_hat: &DensityMatrix,
    spectral: &SpectralStructure,
    target: usize,
) -> f64 {
    lyapunov_v(rho, spectral, target) + lyapunov_v(rho_hat, spectral, target)
}

/// Σ_{i≠j} √(Tr(ρP_i)Tr(ρP_j)), the open-loop reduction Lyapunov function.
pub fn qsr_lyapunov_pops(pops: &[f64]) -> f64 {
    let s: f64 = pops.iter().map(|p| p.max(0.0).sqrt()).sum();
    let sq: f64 = pops.iter().map(|p| p.max(0.0)).sum();
    s * s - sq
}

/// Open-loop exponent bound −½Σ_k η_kγ_k𝗹̲_k².
pub fn qsr_rate_bound(model: &QndModel, spectral: &SpectralStructure) -> f64 {
    -0.5 * (0..model.num_channels())
        .map(|k| model.actual().efficiency_rate(k) * spectral.bold_ell_min[k].powi(2))
        .sum::<f64>()
}

pub fn populations(rho: &DensityMatrix, spectral: &SpectralStructure) -> Vec<f64> {
    spectral.projections.iter().map(|p| (rho.matrix() * p).trace().re).collect()
}

/// Θ_n(ρ) = Tr(i[H₁, ρ]P_n), so that the control drift of Tr(ρP_n) is −uΘ_n.
pub fn theta(model: &QndModel, rho: &CMatrix, p: &CMatrix) -> f64 {
    (linalg::commutator(model.h1(), rho) * C64::new(0.0, 1.0) * p).trace().re
}

/// Functionals of the population vectors of ρ and ρ̂ with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationFunctional {
    /// Tr(ρP_n)
    ActualWeight(usize),
    /// Tr(ρ̂P_n)
    FilterWeight(usize),
    /// V_n̄(ρ) + V_n̄(ρ̂)
    CoupledLyapunov(usize),
    /// Σ_{i≠j}√(p_i p_j) of ρ
    QsrLyapunov,
}

impl PopulationFunctional {
    pub fn value(&self, p: &[f64], ph: &[f64]) -> f64 {
        match *self {
            PopulationFunctional::ActualWeight(n) => p[n],
            PopulationFunctional::FilterWeight(n) => ph[n],
            PopulationFunctional::CoupledLyapunov(t) => lyapunov_v_pops(p, t) + lyapunov_v_pops(ph, t),
            PopulationFunctional::QsrLyapunov => qsr_lyapunov_pops(p),
        }
    }

    /// Gradient and Hessian with respect to (p, p̂) stacked into length 2M.
    fn derivatives(&self, p: &[f64], ph: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let m = p.len();
        let mut g = vec![0.0; 2 * m];
        let mut h = vec![vec![0.0; 2 * m]; 2 * m];
        match *self {
            PopulationFunctional::ActualWeight(n) => g[n] = 1.0,
            PopulationFunctional::FilterWeight(n) => g[m + n] = 1.0,
            PopulationFunctional::CoupledLyapunov(t) => {
                for (off, x) in [(0, p), (m, ph)] {
                    for n in (0..m).filter(|&n| n != t) {
                        g[off + n] = 0.5 / x[n].sqrt();
                        h[off + n][off + n] = -0.25 * x[n].powf(-1.5);
                    }
                }
            }
            PopulationFunctional::QsrLyapunov => {
                let r: Vec<f64> = p.iter().map(|x| x.sqrt()).collect();
                let total: f64 = r.iter().sum();
                for i in 0..m {
                    g[i] = (total - r[i]) / r[i];
                    h[i][i] = -0.5 * (total - r[i]) / (p[i] * r[i]);
                    for j in (0..m).filter(|&j| j != i) {
                        h[i][j] = 0.5 / (r[i] * r[j]);
                    }
                }
            }
        }
        (g, h)
    }
}

/// Control value used at a coupled state: from ρ̂ populations, or q̂ for reduced laws.
pub fn control_at(state: &CoupledState, law: &FeedbackLaw, spectral: &SpectralStructure) -> f64 {
    if law.uses_reduced_filter() {
        let q = state.q_hat.as_ref().expect("reduced law needs q_hat");
        law.evaluate(q, spectral).0
    } else {
        law.evaluate(&populations(&state.rho_hat, spectral), spectral).0
    }
}

/// Closed-form ℒg for a population functional: gradient·drift + ½Σ_k bᵀ∇²g b,
/// with drift −uΘ_n(ρ), −uΘ_n(ρ̂) + Σ√(η̂γ̂)Δ̂_{k,n}𝒯_k p̂_n and diffusion
/// √(ηγ)Δ_{k,n}p_n, √(η̂γ̂)Δ̂_{k,n}p̂_n sharing the innovation dW_k.
pub fn generator_analytic(
    state: &CoupledState,
    model: &QndModel,
    spectral: &SpectralStructure,
    u: f64,
    g: PopulationFunctional,
) -> f64 {
    let big_m = spectral.num_subspaces();
    let p = populations(&state.rho, spectral);
    let ph = populations(&state.rho_hat, spectral);
    let terms = crate::dynamics::SuperoperatorTerms::new(model);
    let (act, est) = (model.actual(), model.estimated());
    let mut drift = vec![0.0; 2 * big_m];
    for n in 0..big_m {
        drift[n] = -u * theta(model, state.rho.matrix(), &spectral.projections[n]);
        drift[big_m + n] = -u * theta(model, state.rho_hat.matrix(), &spectral.projections[n]);
    }
    let mut bs = Vec::new();
    for k in 0..model.num_channels() {
        let s = terms.measurement_mean(k, state.rho.matrix());
        let sh = terms.measurement_mean(k, state.rho_hat.matrix());
        let gap = act.amplitude(k) * s - est.amplitude(k) * sh;
        let mut b = vec![0.0; 2 * big_m];
        for n in 0..big_m {
            let delta = 2.0 * spectral.re_l(k, n) - s;
            let delta_hat = 2.0 * spectral.re_l(k, n) - sh;
            b[n] = act.amplitude(k) * delta * p[n];
            b[big_m + n] = est.amplitude(k) * delta_hat * ph[n];
            drift[big_m + n] += est.amplitude(k) * delta_hat * gap * ph[n];
        }
        bs.push(b);
    }
    let (grad, hess) = g.derivatives(&p, &ph);
    let mut out: f64 = grad.iter().zip(&drift).map(|(a, b)| a * b).sum();
    for b in &bs {
        for i in 0..2 * big_m {
            for j in 0..2 * big_m {
                out += 0.5 * b[i] * hess[i][j] * b[j];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Brute-force ℒg ≈ (E[g(one Itô step)] − g)/dt with antithetic noise pairs.
/// `g` receives the population vectors of ρ and ρ̂ after the step.
#[allow(clippy::too_many_arguments)]
pub fn generator_mc_oracle(
    state: &CoupledState,
    model: &QndModel,
    spectral: &SpectralStructure,
    law: &FeedbackLaw,
    g: &dyn Fn(&[f64], &[f64]) -> f64,
    dt: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GeneratorEstimate, AnalysisError> {
    let u = control_at(state, law, spectral);
    let mut stepper = FrameStepper::new(model);
    let base = stepper.frame_state(state);
    let big_m = spectral.num_subspaces();
    let (mut p, mut ph) = (vec![0.0; big_m], vec![0.0; big_m]);
    model.populations_flat(&base.rho, &mut p);
    model.populations_flat(&base.rho_hat, &mut ph);
    let g0 = g(&p, &ph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut audit = InvariantAudit::default();
    let mut dw = vec![0.0; model.num_channels()];
    let mut fs = base.clone();
    let pairs = (n_samples / 2).max(1);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..pairs {
        for x in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = z * dt.sqrt();
        }
        let mut pair = 0.0;
        for sign in [1.0, -1.0] {
            fs.clone_from(&base);
            let signed: Vec<f64> = dw.iter().map(|x| sign * x).collect();
            stepper.step_coupled(&mut fs, u, u, &signed, dt, &mut audit)?;
            model.populations_flat(&fs.rho, &mut p);
            model.populations_flat(&fs.rho_hat, &mut ph);
            pair += 0.5 * (g(&p, &ph) - g0) / dt;
        }
        sum += pair;
        sq += pair * pair;
    }
    let n = pairs as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(GeneratorEstimate { estimate: mean, stderr: (var / n).sqrt() })
}

/// Random coupled state whose populations all stay ≥ κ/N: Wishart states mixed with I/N.
pub fn random_coupled_state<R: rand::Rng + ?Sized>(n: usize, kappa: f64, channels: usize, rng: &mut R) -> CoupledState {
    let mix = |rho: DensityMatrix| {
        let m =
            rho.into_matrix() * C64::new(1.0 - kappa, 0.0) + CMatrix::identity(n, n) * C64::new(kappa / n as f64, 0.0);
        DensityMatrix::new(m).expect("convex mixture of states")
    };
    let rho = mix(DensityMatrix::random_interior(n, rng));
    let rho_hat = mix(DensityMatrix::random_interior(n, rng));
    CoupledState::new(rho, rho_hat, None, channels)
}

/// Time series of a distance functional along one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSeries {
    pub t: Vec<f64>,
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentEstimate {
    /// Mean over trajectories of the least-squares slope of log(d + floor) against t.
    pub slope: f64,
    /// 95% half-width, 1.96·sd/√n.
    pub ci_halfwidth: f64,
    pub burn_in: f64,
    pub floor: f64,
    pub trajectories: usize,
    /// Trajectories whose distance fell below 10·floor.
    pub decayed: usize,
    pub per_trajectory: Vec<f64>,
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Slope of one series over [burn_in, first time d < 10·floor].
pub fn trajectory_slope(s: &DistanceSeries, burn_in: f64, floor: f64) -> Option<f64> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (&t, &d) in s.t.iter().zip(&s.d) {
        if t < burn_in {
            continue;
        }
        x.push(t);
        y.push((d + floor).ln());
        if d < 10.0 * floor {
            break;
        }
    }
    fit_slope(&x, &y)
}

pub fn estimate_exponent(
    series: &[DistanceSeries],
    burn_in: f64,
    floor: f64,
) -> Result<ExponentEstimate, AnalysisError> {
    if floor <= 0.0 || !floor.is_finite() {
        return Err(AnalysisError::BadFloor);
    }
    if series.len() < MIN_TRAJECTORIES {
        return Err(AnalysisError::TooFewTrajectories { needed: MIN_TRAJECTORIES, got: series.len() });
    }
    let decayed = series.iter().filter(|s| s.d.iter().any(|&d| d < 10.0 * floor)).count();
    if 2 * decayed < series.len() {
        return Err(AnalysisError::InsufficientDecay { decayed, total: series.len() });
    }
    let slopes: Vec<f64> = series.iter().filter_map(|s| trajectory_slope(s, burn_in, floor)).collect();
    if slopes.len() < MIN_TRAJECTORIES {
        return Err(AnalysisError::TooFewTrajectories { needed: MIN_TRAJECTORIES, got: slopes.len() });
    }
    let (mean, half) = mean_ci(&slopes);
    Ok(ExponentEstimate {
        slope: mean,
        ci_halfwidth: half,
        burn_in,
        floor,
        trajectories: slopes.len(),
        decayed,
        per_trajectory: slopes,
    })
}

/// Mean and 95% half-width 1.96·sd/√n.
pub fn mean_ci(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTally {
    pub counts: Vec<usize>,
    pub unresolved: usize,
    pub total: usize,
    pub threshold: f64,
}

impl ConvergenceTally {
    pub fn fraction(&self, n: usize) -> f64 {
        self.counts[n] as f64 / self.total as f64
    }
}

/// Classifies terminal population vectors by the subspace n with E_n < threshold.
pub fn tally_convergence(terminal_pops: &[Vec<f64>], subspaces: usize, threshold: f64) -> ConvergenceTally {
    let mut counts = vec![0; subspaces];
    let mut unresolved = 0;
    for p in terminal_pops {
        match terminal_subspace(p, threshold) {
            Some(n) => counts[n] += 1,
            None => unresolved += 1,
        }
    }
    ConvergenceTally { counts, unresolved, total: terminal_pops.len(), threshold }
}

pub fn terminal_subspace(pops: &[f64], threshold: f64) -> Option<usize> {
    (0..pops.len()).find(|&n| distance_from_pops(pops, n) < threshold)
}

/// Three-sigma binomial half-width for a fraction p over n draws.
pub fn binomial_three_sigma(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EscapeSummary {
    pub total: usize,
    pub exited: usize,
    pub exited_fraction: f64,
    /// Statistics over exited trajectories; None if nobody exited.
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub max: Option<f64>,
}

pub fn escape_time_stats(exit_times: &[Option<f64>]) -> EscapeSummary {
    let mut times: Vec<f64> = exit_times.iter().flatten().copied().collect();
    times.sort_by(f64::total_cmp);
    let exited = times.len();
    let (mean, median, max) = if exited == 0 {
        (None, None, None)
    } else {
        let med = if exited % 2 == 1 { times[exited / 2] } else { 0.5 * (times[exited / 2 - 1] + times[exited / 2]) };
        (Some(times.iter().sum::<f64>() / exited as f64), Some(med), times.last().copied())
    };
    EscapeSummary {
        total: exit_times.len(),
        exited,
        exited_fraction: if exit_times.is_empty() { 0.0 } else { exited as f64 / exit_times.len() as f64 },
        mean,
        median,
        max,
    }
}
