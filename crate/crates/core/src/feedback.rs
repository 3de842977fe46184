//! Feedback laws driven by the full filter ρ̂ or the reduced filter q̂.
//!
//! Both full-filter laws only depend on the subspace populations Tr(ρ̂P_n),
//! so every law is evaluated from a population vector: the populations of ρ̂
//! for the full kinds and q̂ itself for the reduced kinds.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::CMatrix;
use crate::model::{DensityMatrix, SpectralStructure};

pub const DEFAULT_EPS1: f64 = 0.05;
pub const DEFAULT_EPS2: f64 = 0.2;
pub const DEFAULT_U_MAX: f64 = 50.0;

#[derive(Debug, Error, PartialEq)]
pub enum FeedbackError {
    #[error("exponent {0} must be a positive integer: Δ can be negative")]
    NonIntegerPowerOfNegative(f64),
    #[error("invalid law: {0}")]
    InvalidLaw(String),
    #[error("{kind:?} law cannot be evaluated from the {filter} filter")]
    WrongFilter { kind: LawKind, filter: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    SpecialFull,
    GeneralFull,
    SpecialReduced,
    GeneralReduced,
    OpenLoop,
    Custom,
}

/// Population-vector callback for the custom kind.
pub type CustomControl = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct FeedbackLaw {
    kind: LawKind,
    target: usize,
    alpha: f64,
    beta: f64,
    alphas: Vec<f64>,
    betas: Vec<u32>,
    eps1: f64,
    eps2: f64,
    u_max: f64,
    custom: Option<CustomControl>,
    custom_reduced: bool,
}

impl fmt::Debug for FeedbackLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackLaw")
            .field("kind", &self.kind)
            .field("target", &self.target)
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("alphas", &self.alphas)
            .field("betas", &self.betas)
            .field("eps1", &self.eps1)
            .field("eps2", &self.eps2)
            .field("u_max", &self.u_max)
            .finish()
    }
}

/// The serializable law block of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    pub kind: LawKind,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
    #[serde(default)]
    pub eps1: Option<f64>,
    #[serde(default)]
    pub eps2: Option<f64>,
    #[serde(default)]
    pub u_max: Option<f64>,
}

impl LawSpec {
    pub fn open_loop() -> Self {
        LawSpec {
            kind: LawKind::OpenLoop,
            alpha: None,
            beta: None,
            alphas: None,
            betas: None,
            eps1: None,
            eps2: None,
            u_max: None,
        }
    }

    pub fn special(kind: LawKind, alpha: f64, beta: f64) -> Self {
        LawSpec { alpha: Some(alpha), beta: Some(beta), ..LawSpec { kind, ..Self::open_loop() } }
    }

    pub fn general(kind: LawKind, alphas: Vec<f64>, betas: Vec<f64>) -> Self {
        LawSpec { alphas: Some(alphas), betas: Some(betas), ..LawSpec { kind, ..Self::open_loop() } }
    }

    pub fn build(&self, target: usize, channels: usize) -> Result<FeedbackLaw, FeedbackError> {
        let need =
            |v: Option<f64>, name: &str| v.ok_or_else(|| FeedbackError::InvalidLaw(format!("{name} is required")));
        let mut law = match self.kind {
            LawKind::OpenLoop => FeedbackLaw::open_loop(target),
            LawKind::SpecialFull | LawKind::SpecialReduced => {
                FeedbackLaw::special(self.kind, target, need(self.alpha, "alpha")?, need(self.beta, "beta")?)?
            }
            LawKind::GeneralFull | LawKind::GeneralReduced => {
                let alphas =
                    self.alphas.clone().ok_or_else(|| FeedbackError::InvalidLaw("alphas is required".into()))?;
                let betas = self.betas.clone().ok_or_else(|| FeedbackError::InvalidLaw("betas is required".into()))?;
                if alphas.len() != channels || betas.len() != channels {
                    return Err(FeedbackError::InvalidLaw(format!("expected {channels} alphas and betas")));
                }
                FeedbackLaw::general(
                    self.kind,
                    target,
                    alphas,
                    &betas,
                    self.eps1.unwrap_or(DEFAULT_EPS1),
                    self.eps2.unwrap_or(DEFAULT_EPS2),
                )?
            }
            LawKind::Custom => return Err(FeedbackError::InvalidLaw("custom laws are built in code".into())),
        };
        if let Some(u) = self.u_max {
            law = law.with_u_max(u)?;
        }
        Ok(law)
    }
}

impl FeedbackLaw {
    pub fn open_loop(target: usize) -> Self {
        FeedbackLaw {
            kind: LawKind::OpenLoop,
            target,
            alpha: 0.0,
            beta: 1.0,
            alphas: Vec::new(),
            betas: Vec::new(),
            eps1: DEFAULT_EPS1,
            eps2: DEFAULT_EPS2,
            u_max: DEFAULT_U_MAX,
            custom: None,
            custom_reduced: false,
        }
    }

    /// α(1 − Tr(ρ̂P_n̄))^β
    pub fn special_full(target: usize, alpha: f64, beta: f64) -> Self {
        Self::special(LawKind::SpecialFull, target, alpha, beta).expect("invalid special law")
    }

    /// α(1 − q̂_n̄)^β
    pub fn special_reduced(target: usize, alpha: f64, beta: f64) -> Self {
        Self::special(LawKind::SpecialReduced, target, alpha, beta).expect("invalid special law")
    }

    fn special(kind: LawKind, target: usize, alpha: f64, beta: f64) -> Result<Self, FeedbackError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(FeedbackError::InvalidLaw(format!("alpha = {alpha} must be positive")));
        }
        if !(beta >= 1.0 && beta.is_finite()) {
            return Err(FeedbackError::InvalidLaw(format!("beta = {beta} must be at least 1")));
        }
        Ok(FeedbackLaw { kind, alpha, beta, ..Self::open_loop(target) })
    }

    /// f(1 − Tr(ρ̂P_n̄))·Σ_k α_k Δ_{k,n̄}(ρ̂)^{β_k}
    pub fn general_full(
        target: usize,
        alphas: Vec<f64>,
        betas: &[f64],
        eps1: f64,
        eps2: f64,
    ) -> Result<Self, FeedbackError> {
        Self::general(LawKind::GeneralFull, target, alphas, betas, eps1, eps2)
    }

    /// f(1 − q̂_n̄)·Σ_k α_k (Re𝔩_{k,n̄} − Λ_k(q̂))^{β_k}
    pub fn general_reduced(
        target: usize,
        alphas: Vec<f64>,
        betas: &[f64],
        eps1: f64,
        eps2: f64,
    ) -> Result<Self, FeedbackError> {
        Self::general(LawKind::GeneralReduced, target, alphas, betas, eps1, eps2)
    }

    fn general(
        kind: LawKind,
        target: usize,
        alphas: Vec<f64>,
        betas: &[f64],
        eps1: f64,
        eps2: f64,
    ) -> Result<Self, FeedbackError> {
        if alphas.len() != betas.len() || alphas.is_empty() {
            return Err(FeedbackError::InvalidLaw("one alpha and one beta per channel".into()));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(FeedbackError::InvalidLaw("alphas must be positive".into()));
        }
        let mut ints = Vec::with_capacity(betas.len());
        for &b in betas {
            if !(b >= 1.0 && b.fract() == 0.0 && b <= u32::MAX as f64) {
                return Err(FeedbackError::NonIntegerPowerOfNegative(b));
            }
            ints.push(b as u32);
        }
        if !(0.0 < eps1 && eps1 < eps2 && eps2 < 1.0) {
            return Err(FeedbackError::InvalidLaw(format!("need 0 < eps1 < eps2 < 1, got {eps1}, {eps2}")));
        }
        Ok(FeedbackLaw { kind, alphas, betas: ints, eps1, eps2, ..Self::open_loop(target) })
    }

    /// User-supplied law on the population vector of ρ̂ (or of q̂ when `reduced`).
    pub fn custom(target: usize, reduced: bool, f: CustomControl) -> Self {
        FeedbackLaw { kind: LawKind::Custom, custom: Some(f), custom_reduced: reduced, ..Self::open_loop(target) }
    }

    pub fn with_u_max(mut self, u_max: f64) -> Result<Self, FeedbackError> {
        if u_max.is_nan() || u_max <= 0.0 {
            return Err(FeedbackError::InvalidLaw(format!("u_max = {u_max} must be positive")));
        }
        self.u_max = u_max;
        Ok(self)
    }

    pub fn kind(&self) -> LawKind {
        self.kind
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn eps1(&self) -> f64 {
        self.eps1
    }

    /// Whether the law reads q̂ rather than ρ̂.
    pub fn uses_reduced_filter(&self) -> bool {
        match self.kind {
            LawKind::SpecialReduced | LawKind::GeneralReduced => true,
            LawKind::Custom => self.custom_reduced,
            _ => false,
        }
    }

    /// Unclamped control from a population vector.
    pub fn raw(&self, pops: &[f64], spectral: &SpectralStructure) -> f64 {
        let miss = complement(pops, self.target);
        match self.kind {
            LawKind::OpenLoop => 0.0,
            LawKind::SpecialFull | LawKind::SpecialReduced => self.alpha * miss.powf(self.beta),
            LawKind::GeneralFull | LawKind::GeneralReduced => {
                let f = smoothing_f(miss, self.eps1, self.eps2);
                if f == 0.0 {
                    return 0.0;
                }
                // Full: Δ = 2(Re𝔩_n̄ − Λ); reduced: Re𝔩_n̄ − Λ.
                let scale = if self.kind == LawKind::GeneralFull { 2.0 } else { 1.0 };
                let sum: f64 = (0..self.alphas.len())
                    .map(|k| {
                        let base = scale * (spectral.re_l(k, self.target) - lambda(pops, spectral, k));
                        self.alphas[k] * base.powi(self.betas[k] as i32)
                    })
                    .sum();
                f * sum
            }
            LawKind::Custom => (self.custom.as_ref().expect("custom law without callback"))(pops),
        }
    }

    /// Clamped control and whether saturation kicked in.
    pub fn evaluate(&self, pops: &[f64], spectral: &SpectralStructure) -> (f64, bool) {
        let u = self.raw(pops, spectral);
        if u.abs() > self.u_max {
            (u.clamp(-self.u_max, self.u_max), true)
        } else {
            (u, false)
        }
    }

    /// Evaluates from a lab-basis estimated state.
    pub fn evaluate_matrix(&self, rho_hat: &CMatrix, spectral: &SpectralStructure) -> (f64, bool) {
        let pops: Vec<f64> = spectral.projections.iter().map(|p| (rho_hat * p).trace().re).collect();
        self.evaluate(&pops, spectral)
    }

    /// Derivative of the unclamped full-filter law along a Hermitian direction X.
    pub fn directional_derivative(&self, rho_hat: &CMatrix, x: &CMatrix, spectral: &SpectralStructure) -> f64 {
        let pops: Vec<f64> = spectral.projections.iter().map(|p| (rho_hat * p).trace().re).collect();
        let dpops: Vec<f64> = spectral.projections.iter().map(|p| (x * p).trace().re).collect();
        let miss = complement(&pops, self.target);
        let dmiss = -dpops[self.target];
        match self.kind {
            LawKind::OpenLoop => 0.0,
            LawKind::SpecialFull | LawKind::SpecialReduced => {
                self.alpha * self.beta * miss.powf(self.beta - 1.0) * dmiss
            }
            LawKind::GeneralFull | LawKind::GeneralReduced => {
                let scale = if self.kind == LawKind::GeneralFull { 2.0 } else { 1.0 };
                let mut sum = 0.0;
                let mut dsum = 0.0;
                for k in 0..self.alphas.len() {
                    let base = scale * (spectral.re_l(k, self.target) - lambda(&pops, spectral, k));
                    let dbase = -scale * lambda(&dpops, spectral, k);
                    let b = self.betas[k] as i32;
                    sum += self.alphas[k] * base.powi(b);
                    dsum += self.alphas[k] * b as f64 * base.powi(b - 1) * dbase;
                }
                smoothing_f_prime(miss, self.eps1, self.eps2) * dmiss * sum
                    + smoothing_f(miss, self.eps1, self.eps2) * dsum
            }
            LawKind::Custom => f64::NAN,
        }
    }
}

/// Λ_k = Σ_j Re𝔩_{k,j} p_j
pub fn lambda(pops: &[f64], spectral: &SpectralStructure, k: usize) -> f64 {
    pops.iter().enumerate().map(|(j, p)| spectral.re_l(k, j) * p).sum()
}

/// 1 − p_n̄ computed from the other entries, which keeps precision near the target.
pub fn complement(pops: &[f64], target: usize) -> f64 {
    pops.iter().enumerate().filter(|(j, _)| *j != target).map(|(_, p)| p).sum::<f64>().clamp(0.0, 1.0)
}

/// C¹ switch: 0 below ε₁, 1 above ε₂, half a sine period in between.
pub fn smoothing_f(x: f64, eps1: f64, eps2: f64) -> f64 {
    if x < eps1 {
        0.0
    } else if x < eps2 {
        0.5 * (PI * (2.0 * x - eps1 - eps2) / (2.0 * (eps2 - eps1))).sin() + 0.5
    } else {
        1.0
    }
}

pub fn smoothing_f_prime(x: f64, eps1: f64, eps2: f64) -> f64 {
    if (eps1..eps2).contains(&x) {
        let w = PI / (eps2 - eps1);
        0.5 * w * (PI * (2.0 * x - eps1 - eps2) / (2.0 * (eps2 - eps1))).cos()
    } else {
        0.0
    }
}

/// Control from the full filter state.
pub fn control_full(
    law: &FeedbackLaw,
    rho_hat: &DensityMatrix,
    spectral: &SpectralStructure,
) -> Result<f64, FeedbackError> {
    if law.uses_reduced_filter() {
        return Err(FeedbackError::WrongFilter { kind: law.kind, filter: "full" });
    }
    Ok(law.evaluate_matrix(rho_hat.matrix(), spectral).0)
}

/// Control from the reduced filter.
pub fn control_reduced(law: &FeedbackLaw, q_hat: &[f64], spectral: &SpectralStructure) -> Result<f64, FeedbackError> {
    if !law.uses_reduced_filter() && law.kind != LawKind::OpenLoop {
        return Err(FeedbackError::WrongFilter { kind: law.kind, filter: "reduced" });
    }
    Ok(law.evaluate(q_hat, spectral).0)
}
