//! Operators, parameters and the spectral structure of a QND-measured system.
//!
//! A model is validated once at construction: all `L_k` and `H₀` must be
//! diagonal in a common orthonormal basis, and distinct eigenvalues of each
//! `L_k` must have distinct real parts. Internally every operator is also kept
//! in that basis (the "QND frame"), where `H₀` and `L_k` are diagonal and the
//! integrators only need O(N²) work per step apart from the control term.

use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, CMatrix, ONE, ZERO};

/// Entry tolerance shared by state and operator validation.
pub const STATE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0} is not Hermitian (defect {1:.3e})")]
    NotHermitian(&'static str, f64),
    #[error(
        "H0 and the measurement operators are not simultaneously diagonalizable (off-diagonal residue {residue:.3e})"
    )]
    NotSimultaneouslyDiagonalizable { residue: f64 },
    #[error("channel {channel}: distinct eigenvalues {a} and {b} share a real part")]
    H0Violated { channel: usize, a: C64, b: C64 },
    #[error("parameter out of range: {0}")]
    BadParameterRange(String),
    #[error("only one joint eigenspace; no subspace structure to stabilize")]
    DegenerateModel,
    #[error("every channel has a repeated eigenvalue across subspaces (all bold gaps vanish)")]
    VanishingGap,
    #[error("target {target} out of range for {subspaces} subspaces")]
    BadTarget { target: usize, subspaces: usize },
    #[error("invalid density matrix: {0}")]
    InvalidState(String),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A density matrix: Hermitian, PSD, unit trace (all within `STATE_TOL`).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: CMatrix,
}

impl DensityMatrix {
    pub fn new(m: CMatrix) -> Result<Self, ModelError> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(ModelError::InvalidState(format!("shape {}x{}", m.nrows(), m.ncols())));
        }
        let defect = linalg::hermiticity_defect(&m);
        if defect > STATE_TOL {
            return Err(ModelError::InvalidState(format!("hermiticity defect {defect:.3e}")));
        }
        let tr = linalg::trace(&m).re;
        if (tr - 1.0).abs() > STATE_TOL {
            return Err(ModelError::InvalidState(format!("trace {tr}")));
        }
        let min = linalg::eigvalsh(&m)[0];
        if min < -STATE_TOL {
            return Err(ModelError::InvalidState(format!("eigenvalue {min:.3e}")));
        }
        Ok(DensityMatrix { m })
    }

    pub(crate) fn from_unchecked(m: CMatrix) -> Self {
        DensityMatrix { m }
    }

    /// Diagonal state with the given weights (normalized).
    pub fn from_diagonal(weights: &[f64]) -> Result<Self, ModelError> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || total <= 0.0 {
            return Err(ModelError::InvalidState("diagonal weights must be non-negative".into()));
        }
        let d = DVector::from_iterator(weights.len(), weights.iter().map(|w| C64::new(w / total, 0.0)));
        Ok(DensityMatrix { m: CMatrix::from_diagonal(&d) })
    }

    pub fn maximally_mixed(n: usize) -> Self {
        DensityMatrix { m: CMatrix::identity(n, n) * C64::new(1.0 / n as f64, 0.0) }
    }

    /// |ψ⟩⟨ψ| for a (not necessarily normalized) vector.
    pub fn pure(psi: &[C64]) -> Result<Self, ModelError> {
        let v = DVector::from_column_slice(psi);
        let norm = v.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(ModelError::InvalidState("zero state vector".into()));
        }
        let v = v / C64::new(norm, 0.0);
        Ok(DensityMatrix { m: &v * v.adjoint() })
    }

    /// P / Tr(P) for a projection.
    pub fn supported_on(p: &CMatrix) -> Self {
        let tr = linalg::trace(p).re;
        DensityMatrix { m: p * C64::new(1.0 / tr, 0.0) }
    }

    /// Nearest-ish valid state: symmetrize, clip negative eigenvalues, renormalize.
    pub fn project(m: &CMatrix) -> Self {
        let (vals, v) = linalg::eigh(m);
        let clipped: Vec<f64> = vals.iter().map(|x| x.max(0.0)).collect();
        let total: f64 = clipped.iter().sum();
        let d = DVector::from_iterator(clipped.len(), clipped.iter().map(|x| C64::new(x / total, 0.0)));
        let out = &v * CMatrix::from_diagonal(&d) * v.adjoint();
        DensityMatrix { m: linalg::hermitian_part(&out) }
    }

    /// Full-rank random state: normalized Wishart matrix.
    pub fn random_interior<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let g = linalg::ginibre(n, n, rng);
        let w = &g * g.adjoint();
        let tr = linalg::trace(&w).re;
        DensityMatrix { m: linalg::hermitian_part(&(w * C64::new(1.0 / tr, 0.0))) }
    }

    /// Random pure state (boundary of the state space).
    pub fn random_pure<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let g = linalg::ginibre(n, 1, rng);
        let psi: Vec<C64> = g.iter().copied().collect();
        Self::pure(&psi).expect("gaussian vector is nonzero")
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::eigvalsh(&self.m)
    }

    pub fn purity(&self) -> f64 {
        (&self.m * &self.m).trace().re
    }
}

/// (ω, γ_k, η_k) for either the actual system or the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub omega: f64,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
}

impl ParameterSet {
    pub fn new(omega: f64, gamma: Vec<f64>, eta: Vec<f64>) -> Self {
        ParameterSet { omega, gamma, eta }
    }

    /// Same ω, γ, η on every channel.
    pub fn uniform(omega: f64, gamma: f64, eta: f64, channels: usize) -> Self {
        ParameterSet { omega, gamma: vec![gamma; channels], eta: vec![eta; channels] }
    }

    /// √(η_k γ_k)
    pub fn amplitude(&self, k: usize) -> f64 {
        (self.eta[k] * self.gamma[k]).sqrt()
    }

    /// η_k γ_k
    pub fn efficiency_rate(&self, k: usize) -> f64 {
        self.eta[k] * self.gamma[k]
    }

    fn validate(&self, which: &str, channels: usize) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadParameterRange(format!("{which}: {msg}")));
        if self.gamma.len() != channels || self.eta.len() != channels {
            return bad(format!("expected {channels} gamma/eta entries"));
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return bad(format!("omega = {} must be positive", self.omega));
        }
        for (k, (&g, &e)) in self.gamma.iter().zip(&self.eta).enumerate() {
            if !(g.is_finite() && g > 0.0) {
                return bad(format!("gamma[{k}] = {g} must be positive"));
            }
            if !(e > 0.0 && e <= 1.0) {
                return bad(format!("eta[{k}] = {e} must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Operators in the QND frame, flattened for the integrators.
#[derive(Debug, Clone)]
pub(crate) struct Frame {
    pub h0: Vec<f64>,
    pub ls: Vec<Vec<C64>>,
    /// Row-major N×N.
    pub h1: Vec<C64>,
}

#[derive(Debug, Clone)]
pub struct QndModel {
    dim: usize,
    h0: CMatrix,
    h1: CMatrix,
    ls: Vec<CMatrix>,
    actual: ParameterSet,
    estimated: ParameterSet,
    basis: CMatrix,
    basis_is_identity: bool,
    pub(crate) frame: Frame,
    /// Frame indices of each joint eigenspace, ordered by smallest index.
    pub(crate) members: Vec<Vec<usize>>,
    /// 𝔩_{k,n} as `frak[n][k]`.
    pub(crate) frak: Vec<Vec<C64>>,
    eigvals: Vec<Vec<C64>>,
}

/// Validates the QND structure and precomputes the diagonal frame.
pub fn build_model(
    h0: CMatrix,
    h1: CMatrix,
    ls: Vec<CMatrix>,
    actual: ParameterSet,
    estimated: ParameterSet,
) -> Result<QndModel, ModelError> {
    let n = h0.nrows();
    if n == 0 || !h0.is_square() {
        return Err(ModelError::DimensionMismatch("h0 must be a nonempty square matrix".into()));
    }
    if ls.is_empty() {
        return Err(ModelError::DimensionMismatch("at least one measurement channel is required".into()));
    }
    for (name, m) in std::iter::once(("h1", &h1)).chain(ls.iter().map(|l| ("ls", l))) {
        if m.shape() != (n, n) {
            return Err(ModelError::DimensionMismatch(format!("{name} is {:?}, expected {n}x{n}", m.shape())));
        }
    }
    for (name, m) in [("h0", &h0), ("h1", &h1)] {
        let defect = linalg::hermiticity_defect(m);
        if defect > STATE_TOL * linalg::max_abs(m).max(1.0) {
            return Err(ModelError::NotHermitian(name, defect));
        }
    }
    actual.validate("actual", ls.len())?;
    estimated.validate("estimated", ls.len())?;

    let mut gens = vec![linalg::hermitian_part(&h0)];
    for l in &ls {
        gens.push(linalg::hermitian_part(l));
        gens.push(linalg::skew_part(l));
    }
    let scale = gens.iter().map(linalg::max_abs).fold(0.0, f64::max).max(1.0);
    let basis = linalg::joint_diagonalizer(&gens, 1e-9 * scale);
    let basis_is_identity = basis == CMatrix::identity(n, n);

    let to_frame = |a: &CMatrix| if basis_is_identity { a.clone() } else { basis.adjoint() * a * &basis };
    let h0_f = to_frame(&h0);
    let ls_f: Vec<CMatrix> = ls.iter().map(to_frame).collect();
    let mut residue: f64 = 0.0;
    for (op, f) in std::iter::once((&h0, &h0_f)).chain(ls.iter().zip(&ls_f)) {
        let tol = STATE_TOL * linalg::op_norm(op).max(1.0);
        let r = linalg::max_off_diagonal(f);
        if r > tol {
            residue = residue.max(r);
        }
    }
    if residue > 0.0 {
        return Err(ModelError::NotSimultaneouslyDiagonalizable { residue });
    }

    let h0_diag: Vec<f64> = (0..n).map(|i| h0_f[(i, i)].re).collect();
    let l_diag: Vec<Vec<C64>> = ls_f.iter().map(|l| (0..n).map(|i| l[(i, i)]).collect()).collect();

    // Distinct eigenvalues per channel, sorted by real part, with H0 check.
    let mut eigvals = Vec::with_capacity(ls.len());
    for (k, (diag, op)) in l_diag.iter().zip(&ls).enumerate() {
        let tol = STATE_TOL * linalg::op_norm(op).max(f64::MIN_POSITIVE);
        let mut distinct: Vec<C64> = Vec::new();
        for &z in diag {
            if !distinct.iter().any(|d| (d - z).norm() <= tol) {
                distinct.push(z);
            }
        }
        distinct.sort_by(|a, b| a.re.total_cmp(&b.re));
        for w in distinct.windows(2) {
            if (w[1].re - w[0].re).abs() <= STATE_TOL {
                return Err(ModelError::H0Violated { channel: k, a: w[0], b: w[1] });
            }
        }
        eigvals.push(distinct);
    }

    // Joint eigenspaces: identical (H0, L_1..L_m) diagonal tuples.
    let h0_tol = STATE_TOL * linalg::op_norm(&h0);
    let l_tols: Vec<f64> = ls.iter().map(|l| STATE_TOL * linalg::op_norm(l)).collect();
    let same = |i: usize, j: usize| {
        (h0_diag[i] - h0_diag[j]).abs() <= h0_tol && l_diag.iter().zip(&l_tols).all(|(d, &t)| (d[i] - d[j]).norm() <= t)
    };
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        match members.iter_mut().find(|g| same(g[0], i)) {
            Some(g) => g.push(i),
            None => members.push(vec![i]),
        }
    }
    let frak: Vec<Vec<C64>> = members.iter().map(|g| l_diag.iter().map(|d| d[g[0]]).collect()).collect();

    let h1_f = to_frame(&h1);
    let h1_flat: Vec<C64> = (0..n * n).map(|idx| h1_f[(idx / n, idx % n)]).collect();

    Ok(QndModel {
        dim: n,
        h0,
        h1,
        ls,
        actual,
        estimated,
        basis,
        basis_is_identity,
        frame: Frame { h0: h0_diag, ls: l_diag, h1: h1_flat },
        members,
        frak,
        eigvals,
    })
}

impl QndModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_channels(&self) -> usize {
        self.ls.len()
    }

    pub fn h0(&self) -> &CMatrix {
        &self.h0
    }

    pub fn h1(&self) -> &CMatrix {
        &self.h1
    }

    pub fn ls(&self) -> &[CMatrix] {
        &self.ls
    }

    pub fn actual(&self) -> &ParameterSet {
        &self.actual
    }

    pub fn estimated(&self) -> &ParameterSet {
        &self.estimated
    }

    /// Columns form the common eigenbasis.
    pub fn basis(&self) -> &CMatrix {
        &self.basis
    }

    pub fn num_subspaces(&self) -> usize {
        self.members.len()
    }

    /// Same operators with a different filter parameter set.
    pub fn with_estimated(&self, estimated: ParameterSet) -> Result<QndModel, ModelError> {
        estimated.validate("estimated", self.num_channels())?;
        Ok(QndModel { estimated, ..self.clone() })
    }

    pub fn with_actual(&self, actual: ParameterSet) -> Result<QndModel, ModelError> {
        actual.validate("actual", self.num_channels())?;
        Ok(QndModel { actual, ..self.clone() })
    }

    /// Lab-basis matrix to the QND frame.
    pub fn to_frame(&self, a: &CMatrix) -> CMatrix {
        if self.basis_is_identity {
            a.clone()
        } else {
            self.basis.adjoint() * a * &self.basis
        }
    }

    pub fn from_frame(&self, a: &CMatrix) -> CMatrix {
        if self.basis_is_identity {
            a.clone()
        } else {
            &self.basis * a * self.basis.adjoint()
        }
    }

    pub(crate) fn frame_to_flat(&self, rho: &DensityMatrix) -> Vec<C64> {
        let f = self.to_frame(rho.matrix());
        let n = self.dim;
        (0..n * n).map(|idx| f[(idx / n, idx % n)]).collect()
    }

    pub(crate) fn flat_to_lab(&self, flat: &[C64]) -> CMatrix {
        let n = self.dim;
        let f = CMatrix::from_fn(n, n, |i, j| flat[i * n + j]);
        self.from_frame(&f)
    }

    /// Populations Tr(ρP_n) of a row-major frame matrix.
    pub(crate) fn populations_flat(&self, flat: &[C64], out: &mut [f64]) {
        let n = self.dim;
        for (o, g) in out.iter_mut().zip(&self.members) {
            *o = g.iter().map(|&i| flat[i * n + i].re).sum();
        }
    }

    pub fn to_file(&self) -> ModelFile {
        let flat = |m: &CMatrix| {
            let n = m.nrows();
            (0..n * n).map(|idx| [m[(idx / n, idx % n)].re, m[(idx / n, idx % n)].im]).collect()
        };
        ModelFile {
            dim: self.dim,
            channels: self.num_channels(),
            h0: flat(&self.h0),
            h1: flat(&self.h1),
            ls: self.ls.iter().map(flat).collect(),
            actual: self.actual.clone(),
            estimated: self.estimated.clone(),
        }
    }
}

/// Eigen-structure shared by conditions, feedback and analysis.
#[derive(Debug, Clone)]
pub struct SpectralStructure {
    pub basis: CMatrix,
    /// Distinct eigenvalues of each `L_k`, ascending real part.
    pub eigvals: Vec<Vec<C64>>,
    /// Joint eigenprojections in the lab basis.
    pub projections: Vec<CMatrix>,
    /// 𝔩_{k,n} indexed `[n][k]`.
    pub frak_l: Vec<Vec<C64>>,
    pub ell_min: Vec<f64>,
    pub ell_max: Vec<f64>,
    pub bold_ell_min: Vec<f64>,
    /// Basis indices spanning each subspace.
    pub members: Vec<Vec<usize>>,
}

impl SpectralStructure {
    pub fn num_subspaces(&self) -> usize {
        self.projections.len()
    }

    pub fn num_channels(&self) -> usize {
        self.ell_min.len()
    }

    /// Re 𝔩_{k,n}
    pub fn re_l(&self, k: usize, n: usize) -> f64 {
        self.frak_l[n][k].re
    }

    pub fn rank(&self, n: usize) -> usize {
        self.members[n].len()
    }

    pub fn check_target(&self, target: usize) -> Result<(), ModelError> {
        if target < self.num_subspaces() {
            Ok(())
        } else {
            Err(ModelError::BadTarget { target, subspaces: self.num_subspaces() })
        }
    }
}

pub fn spectral_structure(model: &QndModel) -> Result<SpectralStructure, ModelError> {
    let m_sub = model.members.len();
    if m_sub < 2 {
        return Err(ModelError::DegenerateModel);
    }
    let n = model.dim;
    let projections = model
        .members
        .iter()
        .map(|g| {
            let d = DVector::from_fn(n, |i, _| if g.contains(&i) { ONE } else { ZERO });
            model.from_frame(&CMatrix::from_diagonal(&d))
        })
        .collect();
    let mut ell_min = Vec::new();
    let mut ell_max = Vec::new();
    let mut bold = Vec::new();
    for (k, ev) in model.eigvals.iter().enumerate() {
        let gaps = ev.windows(2).map(|w| w[1].re - w[0].re);
        ell_min.push(gaps.fold(f64::INFINITY, f64::min));
        ell_max.push((ev[ev.len() - 1].re - ev[0].re).abs());
        let mut b = f64::INFINITY;
        for i in 0..m_sub {
            for j in (i + 1)..m_sub {
                b = b.min((model.frak[i][k].re - model.frak[j][k].re).abs());
            }
        }
        bold.push(b);
    }
    // A channel with a single eigenvalue carries no information.
    for v in ell_min.iter_mut() {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    if bold.iter().sum::<f64>() <= 0.0 {
        return Err(ModelError::VanishingGap);
    }
    Ok(SpectralStructure {
        basis: model.basis.clone(),
        eigvals: model.eigvals.clone(),
        projections,
        frak_l: model.frak.clone(),
        ell_min,
        ell_max,
        bold_ell_min: bold,
        members: model.members.clone(),
    })
}

/// Tr(ρP), clamped to [0, 1].
pub fn subspace_weight(rho: &DensityMatrix, p: &CMatrix) -> f64 {
    let w = (rho.matrix() * p).trace().re;
    debug_assert!((-STATE_TOL..=1.0 + STATE_TOL).contains(&w), "weight {w}");
    w.clamp(0.0, 1.0)
}

/// JSON model document; matrices are row-major lists of `[re, im]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub dim: usize,
    pub channels: usize,
    pub h0: Vec<[f64; 2]>,
    pub h1: Vec<[f64; 2]>,
    pub ls: Vec<Vec<[f64; 2]>>,
    pub actual: ParameterSet,
    pub estimated: ParameterSet,
}

impl ModelFile {
    pub fn build(&self) -> Result<QndModel, ModelError> {
        let n = self.dim;
        let mat = |name: &str, v: &[[f64; 2]]| {
            if v.len() != n * n {
                return Err(ModelError::DimensionMismatch(format!(
                    "{name} has {} entries, expected {}",
                    v.len(),
                    n * n
                )));
            }
            Ok(CMatrix::from_fn(n, n, |i, j| C64::new(v[i * n + j][0], v[i * n + j][1])))
        };
        if self.ls.len() != self.channels {
            return Err(ModelError::DimensionMismatch(format!(
                "{} measurement operators for {} channels",
                self.ls.len(),
                self.channels
            )));
        }
        let ls = self.ls.iter().map(|l| mat("ls", l)).collect::<Result<Vec<_>, _>>()?;
        build_model(mat("h0", &self.h0)?, mat("h1", &self.h1)?, ls, self.actual.clone(), self.estimated.clone())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn diag(values: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&DVector::from_iterator(values.len(), values.iter().map(|&v| C64::new(v, 0.0))))
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn pauli_z() -> CMatrix {
    diag(&[1.0, -1.0])
}

/// Spin-j angular momentum matrices (J_x, J_z) in the J_z eigenbasis,
/// ordered from m = j down to m = −j.
pub fn spin_matrices(two_j: usize) -> (CMatrix, CMatrix) {
    let n = two_j + 1;
    let j = two_j as f64 / 2.0;
    let ms: Vec<f64> = (0..n).map(|i| j - i as f64).collect();
    let mut jx = CMatrix::zeros(n, n);
    for i in 0..n - 1 {
        // ⟨m+1|J₊|m⟩ = √(j(j+1) − m(m+1))
        let m = ms[i + 1];
        let c = 0.5 * (j * (j + 1.0) - m * (m + 1.0)).sqrt();
        jx[(i, i + 1)] = C64::new(c, 0.0);
        jx[(i + 1, i)] = C64::new(c, 0.0);
    }
    (jx, diag(&ms))
}
