//! Integrators for the actual SME, the full filter, the reduced filter and
//! the deterministic support system.
//!
//! `SuperoperatorTerms` evaluates the vector fields with dense lab-basis
//! matrices and is the reference implementation. `FrameStepper` is the fast
//! path used for Monte Carlo: it works in the QND frame, where every term
//! except the control Hamiltonian is an entrywise multiplier.

use num_complex::Complex64 as C64;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, CMatrix, ZERO};
use crate::model::{DensityMatrix, ParameterSet, QndModel, SpectralStructure};

/// Pre-projection trace deviation that aborts a step.
pub const TRACE_REJECT: f64 = 0.1;
/// Pre-clip eigenvalues below this count as positivity violations.
pub const POSITIVITY_AUDIT: f64 = -1e-9;
/// Eigenvalues above this count towards the resolved rank.
pub const RANK_THRESHOLD: f64 = 1e-8;
/// Shift used by the Cholesky fast path; smaller negative eigenvalues are round-off.
const PSD_SHIFT: f64 = 1e-12;
pub const DEFAULT_V_MAX: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("step rejected: pre-projection {what} deviates from 1 by {deviation:.3e} (dt too large?)")]
    StepRejected { what: &'static str, deviation: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("state left the physical region: {0}")]
    NonPhysical(String),
}

/// Dense evaluators of the SME vector fields in the lab basis.
pub struct SuperoperatorTerms<'a> {
    model: &'a QndModel,
}

impl<'a> SuperoperatorTerms<'a> {
    pub fn new(model: &'a QndModel) -> Self {
        SuperoperatorTerms { model }
    }

    /// Tr((L_k + L_kᴴ)ρ)
    pub fn measurement_mean(&self, k: usize, rho: &CMatrix) -> f64 {
        let l = &self.model.ls()[k];
        ((l + l.adjoint()) * rho).trace().re
    }

    /// F^k(ρ) = γ_k(LρLᴴ − ½{LᴴL, ρ})
    pub fn dissipator(&self, k: usize, rho: &CMatrix, p: &ParameterSet) -> CMatrix {
        let l = &self.model.ls()[k];
        let ld = l.adjoint();
        let ll = &ld * l;
        (l * rho * &ld - (&ll * rho + rho * &ll) * C64::new(0.5, 0.0)) * C64::new(p.gamma[k], 0.0)
    }

    /// 𝓛ᵘ(ρ) = −i[ωH₀ + uH₁, ρ] + Σ_k F^k(ρ)
    pub fn lindblad_drift(&self, rho: &CMatrix, u: f64, p: &ParameterSet) -> CMatrix {
        let h = self.model.h0() * C64::new(p.omega, 0.0) + self.model.h1() * C64::new(u, 0.0);
        let mut out = linalg::commutator(&h, rho) * C64::new(0.0, -1.0);
        for k in 0..self.model.num_channels() {
            out += self.dissipator(k, rho, p);
        }
        out
    }

    /// 𝓖ᵏ(ρ) = √(η_kγ_k)(Lρ + ρLᴴ − Tr((L+Lᴴ)ρ)ρ)
    pub fn diffusion(&self, k: usize, rho: &CMatrix, p: &ParameterSet) -> CMatrix {
        let l = &self.model.ls()[k];
        let s = self.measurement_mean(k, rho);
        (l * rho + rho * l.adjoint() - rho * C64::new(s, 0.0)) * C64::new(p.amplitude(k), 0.0)
    }

    /// 𝒯_k(ρ, ρ̂) = √(ηγ)Tr((L+Lᴴ)ρ) − √(η̂γ̂)Tr((L+Lᴴ)ρ̂)
    pub fn innovation_gap(&self, k: usize, rho: &CMatrix, rho_hat: &CMatrix) -> f64 {
        self.model.actual().amplitude(k) * self.measurement_mean(k, rho)
            - self.model.estimated().amplitude(k) * self.measurement_mean(k, rho_hat)
    }

    /// Stratonovich drift of the support system.
    pub fn strat_drift(&self, rho: &CMatrix, u: f64, p: &ParameterSet) -> CMatrix {
        let h = self.model.h0() * C64::new(p.omega, 0.0) + self.model.h1() * C64::new(u, 0.0);
        let mut out = linalg::commutator(&h, rho) * C64::new(0.0, -1.0);
        for (k, l) in self.model.ls().iter().enumerate() {
            let (g, eta) = (p.gamma[k], p.eta[k]);
            let ld = l.adjoint();
            let sym = l + &ld;
            let sq = (&sym * &sym * rho).trace().re;
            let left = &ld * l + l * l * C64::new(eta, 0.0);
            let right = &ld * l + &ld * &ld * C64::new(eta, 0.0);
            let term = l * rho * &ld * C64::new(2.0 * (1.0 - eta), 0.0) - left * rho - rho * right
                + rho * C64::new(eta * sq, 0.0);
            out += term * C64::new(0.5 * g, 0.0);
        }
        out
    }
}

/// Joint trajectory point of the actual state, the full filter and the
/// optional reduced filter.
#[derive(Debug, Clone)]
pub struct CoupledState {
    pub t: f64,
    pub rho: DensityMatrix,
    pub rho_hat: DensityMatrix,
    pub q_hat: Option<Vec<f64>>,
    /// Accumulated observation Y_k.
    pub y: Vec<f64>,
    /// Accumulated innovation W_k.
    pub w: Vec<f64>,
}

impl CoupledState {
    pub fn new(rho: DensityMatrix, rho_hat: DensityMatrix, q_hat: Option<Vec<f64>>, channels: usize) -> Self {
        CoupledState { t: 0.0, rho, rho_hat, q_hat, y: vec![0.0; channels], w: vec![0.0; channels] }
    }
}

/// Per-trajectory invariant counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct InvariantAudit {
    pub steps: u64,
    /// Eigenvalue clip performed (Cholesky fast path failed).
    pub clip_events: u64,
    /// Pre-clip eigenvalue below −1e-9.
    pub positivity_violations: u64,
    /// A step annihilated an eigenvalue that was above 1e-8 at step start.
    pub rank_decrease_events: u64,
    pub min_pre_clip_eigenvalue: f64,
    /// Pre-projection |Tr − 1| above 10·dt.
    pub trace_drift_events: u64,
    pub max_pre_projection_trace_error: f64,
    /// Reduced filter: negative mass above 1e-6·dt in one step.
    pub simplex_negative_mass_events: u64,
    pub max_simplex_negative_mass: f64,
    /// Reduced filter: |Σq̂ − 1| above 1e-9 after projection.
    pub simplex_sum_violations: u64,
    /// Filter reached Tr(ρ̂P_n̄) ≥ 1 − 1e-12 (monitored, not a violation).
    pub never_reach_events: u64,
    pub saturation_events: u64,
    pub step_rejections: u64,
}

impl InvariantAudit {
    /// Counters that make a run fail.
    pub fn hard_violations(&self) -> u64 {
        self.positivity_violations
            + self.rank_decrease_events
            + self.simplex_negative_mass_events
            + self.simplex_sum_violations
            + self.step_rejections
    }

    pub fn merge(&mut self, o: &InvariantAudit) {
        self.steps += o.steps;
        self.clip_events += o.clip_events;
        self.positivity_violations += o.positivity_violations;
        self.rank_decrease_events += o.rank_decrease_events;
        self.min_pre_clip_eigenvalue = self.min_pre_clip_eigenvalue.min(o.min_pre_clip_eigenvalue);
        self.trace_drift_events += o.trace_drift_events;
        self.max_pre_projection_trace_error = self.max_pre_projection_trace_error.max(o.max_pre_projection_trace_error);
        self.simplex_negative_mass_events += o.simplex_negative_mass_events;
        self.max_simplex_negative_mass = self.max_simplex_negative_mass.max(o.max_simplex_negative_mass);
        self.simplex_sum_violations += o.simplex_sum_violations;
        self.never_reach_events += o.never_reach_events;
        self.saturation_events += o.saturation_events;
        self.step_rejections += o.step_rejections;
    }
}

struct Coeffs {
    /// −iω(h_i − h_j) + Σ_k γ_k(l_i l̄_j − ½(|l_i|² + |l_j|²)), row-major.
    drift: Vec<C64>,
    /// √(η_kγ_k)
    amp: Vec<f64>,
}

impl Coeffs {
    fn new(model: &QndModel, p: &ParameterSet) -> Self {
        let n = model.dim();
        let f = &model.frame;
        let mut drift = vec![ZERO; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut c = C64::new(0.0, -p.omega * (f.h0[i] - f.h0[j]));
                for (k, l) in f.ls.iter().enumerate() {
                    c += (l[i] * l[j].conj() - 0.5 * (l[i].norm_sqr() + l[j].norm_sqr())) * p.gamma[k];
                }
                drift[i * n + j] = c;
            }
        }
        Coeffs { drift, amp: (0..model.num_channels()).map(|k| p.amplitude(k)).collect() }
    }
}

/// States in the QND frame, row-major.
#[derive(Debug, Clone)]
pub struct FrameState {
    pub t: f64,
    pub rho: Vec<C64>,
    pub rho_hat: Vec<C64>,
    pub q_hat: Option<Vec<f64>>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
}

/// Allocation-free stepper in the QND frame: Euler–Maruyama for the
/// measurement part, exact unitary for the control Hamiltonian.
pub struct FrameStepper<'m> {
    model: &'m QndModel,
    n: usize,
    m: usize,
    /// l_{k,i} + l̄_{k,j}, channel-major blocks of N².
    lsum: Vec<C64>,
    /// 2Re l_{k,i}, channel-major blocks of N.
    two_re_l: Vec<f64>,
    act: Coeffs,
    est: Coeffs,
    control: ControlPropagator,
    /// Re𝔩_{k,n} at `[n * m + k]`.
    re_frak: Vec<f64>,
    next_rho: Vec<C64>,
    next_hat: Vec<C64>,
    work: Vec<C64>,
    s_act: Vec<f64>,
    s_est: Vec<f64>,
    noise_f: Vec<f64>,
    dy: Vec<f64>,
    lam: Vec<f64>,
    q_next: Vec<f64>,
}

impl<'m> FrameStepper<'m> {
    pub fn new(model: &'m QndModel) -> Self {
        let n = model.dim();
        let m = model.num_channels();
        let f = &model.frame;
        let mut lsum = Vec::with_capacity(m * n * n);
        let mut two_re_l = Vec::with_capacity(m * n);
        for l in &f.ls {
            for i in 0..n {
                for j in 0..n {
                    lsum.push(l[i] + l[j].conj());
                }
            }
            two_re_l.extend(l.iter().map(|z| 2.0 * z.re));
        }
        let re_frak = model.frak.iter().flat_map(|row| row.iter().map(|z| z.re)).collect();
        FrameStepper {
            model,
            n,
            m,
            lsum,
            two_re_l,
            act: Coeffs::new(model, model.actual()),
            est: Coeffs::new(model, model.estimated()),
            control: ControlPropagator::new(n, &f.h1),
            re_frak,
            next_rho: vec![ZERO; n * n],
            next_hat: vec![ZERO; n * n],
            work: vec![ZERO; n * n],
            s_act: vec![0.0; m],
            s_est: vec![0.0; m],
            noise_f: vec![0.0; m],
            dy: vec![0.0; m],
            lam: vec![0.0; m],
            q_next: vec![0.0; model.num_subspaces()],
        }
    }

    pub fn model(&self) -> &QndModel {
        self.model
    }

    pub fn frame_state(&self, st: &CoupledState) -> FrameState {
        FrameState {
            t: st.t,
            rho: self.model.frame_to_flat(&st.rho),
            rho_hat: self.model.frame_to_flat(&st.rho_hat),
            q_hat: st.q_hat.clone(),
            y: st.y.clone(),
            w: st.w.clone(),
        }
    }

    pub fn lab_state(&self, fs: &FrameState) -> CoupledState {
        CoupledState {
            t: fs.t,
            rho: DensityMatrix::from_unchecked(self.model.flat_to_lab(&fs.rho)),
            rho_hat: DensityMatrix::from_unchecked(self.model.flat_to_lab(&fs.rho_hat)),
            q_hat: fs.q_hat.clone(),
            y: fs.y.clone(),
            w: fs.w.clone(),
        }
    }

    /// Tr((L_k + L_kᴴ)ρ) for every channel.
    fn means(&self, rho: &[C64], out: &mut [f64]) {
        let n = self.n;
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.two_re_l[k * n..(k + 1) * n];
            *o = (0..n).map(|i| w[i] * rho[i * n + i].re).sum();
        }
    }

    /// Euler–Maruyama update of the measurement part; `noise[k]` multiplies 𝓖ᵏ.
    #[allow(clippy::too_many_arguments)]
    fn euler(n: usize, lsum: &[C64], c: &Coeffs, s: &[f64], cur: &[C64], out: &mut [C64], noise: &[f64], dt: f64) {
        let n2 = n * n;
        for idx in 0..n2 {
            let mut mult = c.drift[idx] * dt;
            for k in 0..s.len() {
                mult += (lsum[k * n2 + idx] - s[k]) * (c.amp[k] * noise[k]);
            }
            out[idx] = cur[idx] + cur[idx] * mult;
        }
    }

    /// One coupled step. Feedback values are held over the step.
    pub fn step_coupled(
        &mut self,
        st: &mut FrameState,
        u_actual: f64,
        u_filter: f64,
        dw: &[f64],
        dt: f64,
        audit: &mut InvariantAudit,
    ) -> Result<(), DynamicsError> {
        let mut s_act = std::mem::take(&mut self.s_act);
        let mut s_est = std::mem::take(&mut self.s_est);
        self.means(&st.rho, &mut s_act);
        self.means(&st.rho_hat, &mut s_est);
        for k in 0..self.m {
            self.dy[k] = dw[k] + self.act.amp[k] * s_act[k] * dt;
            self.noise_f[k] = self.dy[k] - self.est.amp[k] * s_est[k] * dt;
        }
        Self::euler(self.n, &self.lsum, &self.act, &s_act, &st.rho, &mut self.next_rho, dw, dt);
        Self::euler(self.n, &self.lsum, &self.est, &s_est, &st.rho_hat, &mut self.next_hat, &self.noise_f, dt);
        self.control.apply(u_actual * dt, &mut self.next_rho);
        self.control.apply(u_filter * dt, &mut self.next_hat);
        self.s_act = s_act;
        self.s_est = s_est;
        project_flat(self.n, &mut self.next_rho, &st.rho, &mut self.work, dt, audit)?;
        project_flat(self.n, &mut self.next_hat, &st.rho_hat, &mut self.work, dt, audit)?;
        std::mem::swap(&mut st.rho, &mut self.next_rho);
        std::mem::swap(&mut st.rho_hat, &mut self.next_hat);
        if let Some(q) = st.q_hat.as_mut() {
            let dy = std::mem::take(&mut self.dy);
            let r = self.reduced_step(q, &dy, dt, audit);
            self.dy = dy;
            r?;
        }
        for k in 0..self.m {
            st.y[k] += self.dy[k];
            st.w[k] += dw[k];
        }
        st.t += dt;
        audit.steps += 1;
        Ok(())
    }

    /// Filter update from an observation increment.
    pub fn step_filter(
        &mut self,
        rho_hat: &mut Vec<C64>,
        u: f64,
        dy: &[f64],
        dt: f64,
        audit: &mut InvariantAudit,
    ) -> Result<(), DynamicsError> {
        let mut s_est = std::mem::take(&mut self.s_est);
        self.means(rho_hat, &mut s_est);
        for k in 0..self.m {
            self.noise_f[k] = dy[k] - self.est.amp[k] * s_est[k] * dt;
        }
        Self::euler(self.n, &self.lsum, &self.est, &s_est, rho_hat, &mut self.next_hat, &self.noise_f, dt);
        self.control.apply(u * dt, &mut self.next_hat);
        self.s_est = s_est;
        project_flat(self.n, &mut self.next_hat, rho_hat, &mut self.work, dt, audit)?;
        std::mem::swap(rho_hat, &mut self.next_hat);
        Ok(())
    }

    /// Reduced filter update in place.
    pub fn reduced_step(
        &mut self,
        q: &mut [f64],
        dy: &[f64],
        dt: f64,
        audit: &mut InvariantAudit,
    ) -> Result<(), DynamicsError> {
        let (m, big_m) = (self.m, q.len());
        for k in 0..m {
            self.lam[k] = (0..big_m).map(|j| self.re_frak[j * m + k] * q[j]).sum();
        }
        let mut sum = 0.0;
        let mut negative = 0.0;
        for n in 0..big_m {
            let mut inc = 0.0;
            for k in 0..m {
                let r = self.est.amp[k];
                inc += 2.0 * r * (self.re_frak[n * m + k] - self.lam[k]) * (dy[k] - 2.0 * r * self.lam[k] * dt);
            }
            let v = q[n] + q[n] * inc;
            if v < 0.0 {
                negative -= v;
            }
            self.q_next[n] = v;
            sum += v;
        }
        if !sum.is_finite() || (sum - 1.0).abs() > TRACE_REJECT {
            audit.step_rejections += 1;
            return Err(DynamicsError::StepRejected { what: "simplex sum", deviation: (sum - 1.0).abs() });
        }
        audit.max_simplex_negative_mass = audit.max_simplex_negative_mass.max(negative);
        if negative > 1e-6 * dt {
            audit.simplex_negative_mass_events += 1;
        }
        let clipped: f64 = self.q_next.iter().map(|v| v.max(0.0)).sum();
        if (clipped - 1.0).abs() > TRACE_REJECT {
            audit.step_rejections += 1;
            return Err(DynamicsError::StepRejected { what: "clipped simplex sum", deviation: (clipped - 1.0).abs() });
        }
        for n in 0..big_m {
            q[n] = self.q_next[n].max(0.0) / clipped;
        }
        if (q.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            audit.simplex_sum_violations += 1;
        }
        Ok(())
    }
}

/// exp(−iθH₁) conjugation in the frame. The control Hamiltonian is applied
/// as an exact unitary after the measurement update; an explicit Euler
/// commutator loses positivity by (u·dt)² on nearly pure states.
#[derive(Debug, Clone)]
struct ControlPropagator {
    n: usize,
    zero: bool,
    vals: Vec<f64>,
    /// Spectral projectors of H₁, one n×n block per eigenvalue.
    projectors: Vec<C64>,
    theta: f64,
    unitary: Vec<C64>,
    tmp: Vec<C64>,
}

impl ControlPropagator {
    fn new(n: usize, h1: &[C64]) -> Self {
        let zero = h1.iter().all(|z| *z == ZERO);
        let (vals, v) = linalg::eigh(&CMatrix::from_fn(n, n, |i, j| h1[i * n + j]));
        let projectors = (0..n * n * n)
            .map(|idx| {
                let (c, i, j) = (idx / (n * n), (idx / n) % n, idx % n);
                v[(i, c)] * v[(j, c)].conj()
            })
            .collect();
        let mut unitary = vec![ZERO; n * n];
        for i in 0..n {
            unitary[i * n + i] = C64::new(1.0, 0.0);
        }
        ControlPropagator { n, zero, vals, projectors, theta: 0.0, unitary, tmp: vec![ZERO; n * n] }
    }

    fn apply(&mut self, theta: f64, buf: &mut [C64]) {
        if theta == 0.0 || self.zero {
            return;
        }
        let n = self.n;
        if theta != self.theta {
            self.rebuild(theta);
        }
        self.tmp.iter_mut().for_each(|z| *z = ZERO);
        for i in 0..n {
            let out = &mut self.tmp[i * n..(i + 1) * n];
            for l in 0..n {
                let a = self.unitary[i * n + l];
                for (o, b) in out.iter_mut().zip(&buf[l * n..(l + 1) * n]) {
                    *o += a * b;
                }
            }
        }
        // buf is Hermitian: fill the upper triangle of (U·buf)·U* and mirror it.
        for i in 0..n {
            let ti = &self.tmp[i * n..(i + 1) * n];
            for j in i..n {
                let uj = &self.unitary[j * n..(j + 1) * n];
                let mut acc = ZERO;
                for (a, b) in ti.iter().zip(uj) {
                    acc += a * b.conj();
                }
                buf[i * n + j] = acc;
                buf[j * n + i] = acc.conj();
            }
        }
    }

    fn rebuild(&mut self, theta: f64) {
        self.unitary.iter_mut().for_each(|z| *z = ZERO);
        let nn = self.n * self.n;
        for (c, &h) in self.vals.iter().enumerate() {
            let p = C64::from_polar(1.0, -theta * h);
            for (u, q) in self.unitary.iter_mut().zip(&self.projectors[c * nn..(c + 1) * nn]) {
                *u += p * q;
            }
        }
        self.theta = theta;
    }
}

/// Symmetrize, clip negative eigenvalues and renormalize a row-major state,
/// auditing against the pre-step state `prev`.
fn project_flat(
    n: usize,
    buf: &mut [C64],
    prev: &[C64],
    work: &mut [C64],
    dt: f64,
    audit: &mut InvariantAudit,
) -> Result<(), DynamicsError> {
    let pre: f64 = (0..n).map(|i| buf[i * n + i].re).sum();
    let dev = (pre - 1.0).abs();
    if !dev.is_finite() || dev > TRACE_REJECT {
        audit.step_rejections += 1;
        return Err(DynamicsError::StepRejected { what: "trace", deviation: dev });
    }
    audit.max_pre_projection_trace_error = audit.max_pre_projection_trace_error.max(dev);
    if dev > 10.0 * dt {
        audit.trace_drift_events += 1;
    }
    for i in 0..n {
        buf[i * n + i].im = 0.0;
        for j in (i + 1)..n {
            let a = 0.5 * (buf[i * n + j] + buf[j * n + i].conj());
            buf[i * n + j] = a;
            buf[j * n + i] = a.conj();
        }
    }
    if !linalg::is_positive_definite(buf, n, PSD_SHIFT * pre, work) {
        let mat = CMatrix::from_fn(n, n, |i, j| buf[i * n + j]);
        let (vals, vecs) = linalg::eigh(&mat);
        audit.clip_events += 1;
        audit.min_pre_clip_eigenvalue = audit.min_pre_clip_eigenvalue.min(vals[0]);
        if vals[0] < POSITIVITY_AUDIT {
            audit.positivity_violations += 1;
        }
        let before = linalg::eigvalsh(&CMatrix::from_fn(n, n, |i, j| prev[i * n + j]));
        let resolved = before.iter().filter(|&&v| v > RANK_THRESHOLD).count();
        let surviving = vals.iter().filter(|&&v| v > 0.0).count();
        if surviving < resolved {
            audit.rank_decrease_events += 1;
        }
        for i in 0..n {
            for j in 0..n {
                let mut acc = ZERO;
                for (c, &v) in vals.iter().enumerate() {
                    if v > 0.0 {
                        acc += vecs[(i, c)] * vecs[(j, c)].conj() * v;
                    }
                }
                buf[i * n + j] = acc;
            }
        }
    }
    // The vector fields are trace-free, so an Euler step only leaves the
    // trace through clipping; a large clipped mass means dt is too large.
    let tr: f64 = (0..n).map(|i| buf[i * n + i].re).sum();
    if (tr - 1.0).abs() > TRACE_REJECT {
        audit.step_rejections += 1;
        return Err(DynamicsError::StepRejected { what: "clipped trace", deviation: (tr - 1.0).abs() });
    }
    let inv = 1.0 / tr;
    for z in buf.iter_mut() {
        *z *= inv;
    }
    Ok(())
}

fn check_channels(model: &QndModel, v: &[f64], what: &str) -> Result<(), DynamicsError> {
    if v.len() != model.num_channels() {
        return Err(DynamicsError::DimensionMismatch(format!(
            "{what} has {} entries for {} channels",
            v.len(),
            model.num_channels()
        )));
    }
    Ok(())
}

/// One step of (ρ, ρ̂, q̂) driven by the innovation increment `dw`: Euler–Maruyama
/// measurement update, exact control unitary, then projection.
pub fn step_coupled_ito(
    state: &CoupledState,
    model: &QndModel,
    u_actual: f64,
    u_filter: f64,
    dw: &[f64],
    dt: f64,
) -> Result<CoupledState, DynamicsError> {
    check_channels(model, dw, "dW")?;
    let mut stepper = FrameStepper::new(model);
    let mut fs = stepper.frame_state(state);
    let mut audit = InvariantAudit::default();
    stepper.step_coupled(&mut fs, u_actual, u_filter, dw, dt, &mut audit)?;
    Ok(stepper.lab_state(&fs))
}

/// Filter step from a recorded observation increment `dy`.
pub fn step_filter_from_record(
    rho_hat: &DensityMatrix,
    model: &QndModel,
    u: f64,
    dy: &[f64],
    dt: f64,
) -> Result<DensityMatrix, DynamicsError> {
    check_channels(model, dy, "dY")?;
    let mut stepper = FrameStepper::new(model);
    let mut flat = model.frame_to_flat(rho_hat);
    stepper.step_filter(&mut flat, u, dy, dt, &mut InvariantAudit::default())?;
    Ok(DensityMatrix::from_unchecked(model.flat_to_lab(&flat)))
}

/// Reduced (diagonal) filter step from a recorded observation increment.
pub fn step_reduced_filter(
    q_hat: &[f64],
    model: &QndModel,
    spectral: &SpectralStructure,
    dy: &[f64],
    dt: f64,
) -> Result<Vec<f64>, DynamicsError> {
    check_channels(model, dy, "dY")?;
    if q_hat.len() != spectral.num_subspaces() {
        return Err(DynamicsError::DimensionMismatch(format!("q_hat has {} entries", q_hat.len())));
    }
    let mut stepper = FrameStepper::new(model);
    let mut q = q_hat.to_vec();
    stepper.reduced_step(&mut q, dy, dt, &mut InvariantAudit::default())?;
    Ok(q)
}

/// RK4 step of the deterministic support system with |v_k| clamped to `DEFAULT_V_MAX`.
pub fn step_deterministic_control(
    rho_v: &DensityMatrix,
    rho_hat_v: &DensityMatrix,
    model: &QndModel,
    u: f64,
    v: &[f64],
    dt: f64,
) -> Result<(DensityMatrix, DensityMatrix), DynamicsError> {
    step_deterministic_control_bounded(rho_v, rho_hat_v, model, u, v, dt, DEFAULT_V_MAX)
}

pub fn step_deterministic_control_bounded(
    rho_v: &DensityMatrix,
    rho_hat_v: &DensityMatrix,
    model: &QndModel,
    u: f64,
    v: &[f64],
    dt: f64,
    v_max: f64,
) -> Result<(DensityMatrix, DensityMatrix), DynamicsError> {
    check_channels(model, v, "v")?;
    let terms = SuperoperatorTerms::new(model);
    let v: Vec<f64> = v.iter().map(|x| x.clamp(-v_max, v_max)).collect();
    let (act, est) = (model.actual(), model.estimated());
    let field = |r: &CMatrix, rh: &CMatrix| {
        let mut dr = terms.strat_drift(r, u, act);
        let mut drh = terms.strat_drift(rh, u, est);
        for k in 0..model.num_channels() {
            let vk = v[k] + act.amplitude(k) * terms.measurement_mean(k, r);
            dr += terms.diffusion(k, r, act) * C64::new(vk, 0.0);
            drh += terms.diffusion(k, rh, est) * C64::new(vk, 0.0);
        }
        (dr, drh)
    };
    let c = |x: f64| C64::new(x, 0.0);
    let (r0, h0) = (rho_v.matrix(), rho_hat_v.matrix());
    let (k1r, k1h) = field(r0, h0);
    let (k2r, k2h) = field(&(r0 + &k1r * c(dt / 2.0)), &(h0 + &k1h * c(dt / 2.0)));
    let (k3r, k3h) = field(&(r0 + &k2r * c(dt / 2.0)), &(h0 + &k2h * c(dt / 2.0)));
    let (k4r, k4h) = field(&(r0 + &k3r * c(dt)), &(h0 + &k3h * c(dt)));
    let r1 = r0 + (k1r + k2r * c(2.0) + k3r * c(2.0) + k4r) * c(dt / 6.0);
    let h1 = h0 + (k1h + k2h * c(2.0) + k3h * c(2.0) + k4h) * c(dt / 6.0);
    let finish = |m: CMatrix| {
        let m = linalg::hermitian_part(&m);
        let tr = linalg::trace(&m).re;
        if !tr.is_finite() || tr <= 0.0 {
            return Err(DynamicsError::NonPhysical(format!("trace {tr}")));
        }
        DensityMatrix::new(m * c(1.0 / tr)).map_err(|e| DynamicsError::NonPhysical(e.to_string()))
    };
    Ok((finish(r1)?, finish(h1)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, diag, pauli_x, pauli_z, spectral_structure, spin_matrices};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn two_channel() -> QndModel {
        let (jx, jz) = spin_matrices(3);
        let l2 = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            C64::new(1.0, 0.5),
            ZERO,
            ZERO,
            C64::new(-1.0, 0.0),
        ]));
        let act = ParameterSet::new(0.7, vec![1.0, 0.6], vec![0.8, 0.5]);
        let est = ParameterSet::new(0.9, vec![1.3, 0.4], vec![0.6, 0.9]);
        build_model(diag(&[0.3, -0.2, 0.1, 0.5]), jx, vec![jz, l2], act, est).unwrap()
    }

    fn rotated_qutrit() -> QndModel {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = linalg::random_unitary(3, &mut rng);
        let l = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            C64::new(1.0, 0.2),
            C64::new(-0.5, 0.0),
            C64::new(0.2, -0.4),
        ]));
        let act = ParameterSet::new(1.0, vec![0.8], vec![0.7]);
        let est = ParameterSet::new(1.2, vec![1.1], vec![0.9]);
        build_model(
            &u * diag(&[0.5, 0.0, -0.5]) * u.adjoint(),
            linalg::random_hermitian(3, &mut rng),
            vec![&u * l * u.adjoint()],
            act,
            est,
        )
        .unwrap()
    }

    fn dense_euler(model: &QndModel, st: &CoupledState, u: f64, dw: &[f64], dt: f64) -> (CMatrix, CMatrix) {
        let t = SuperoperatorTerms::new(model);
        let (r, h) = (st.rho.matrix(), st.rho_hat.matrix());
        let mut r1 = r + t.lindblad_drift(r, 0.0, model.actual()) * C64::new(dt, 0.0);
        let mut h1 = h + t.lindblad_drift(h, 0.0, model.estimated()) * C64::new(dt, 0.0);
        for k in 0..model.num_channels() {
            let gap = t.innovation_gap(k, r, h);
            r1 += t.diffusion(k, r, model.actual()) * C64::new(dw[k], 0.0);
            h1 += t.diffusion(k, h, model.estimated()) * C64::new(dw[k] + gap * dt, 0.0);
        }
        let (vals, v) = linalg::eigh(model.h1());
        let phases = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            vals.len(),
            vals.iter().map(|&h| C64::from_polar(1.0, -u * dt * h)),
        ));
        let un = &v * phases * v.adjoint();
        (&un * r1 * un.adjoint(), &un * h1 * un.adjoint())
    }

    #[test]
    fn frame_stepper_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut compared = 0;
        for model in [two_channel(), rotated_qutrit()] {
            let n = model.dim();
            for _ in 0..20 {
                let st = CoupledState::new(
                    DensityMatrix::random_interior(n, &mut rng),
                    DensityMatrix::random_interior(n, &mut rng),
                    None,
                    model.num_channels(),
                );
                let dt: f64 = 1e-3;
                let dw: Vec<f64> = (0..model.num_channels()).map(|_| dt.sqrt() * gauss(&mut rng)).collect();
                let (r_ref, h_ref) = dense_euler(&model, &st, 0.7, &dw, dt);
                let out = step_coupled_ito(&st, &model, 0.7, 0.7, &dw, dt).unwrap();
                // Away from the boundary only the trace renormalization differs.
                let r_ref = &r_ref * C64::new(1.0 / linalg::trace(&r_ref).re, 0.0);
                let h_ref = &h_ref * C64::new(1.0 / linalg::trace(&h_ref).re, 0.0);
                if linalg::eigvalsh(&r_ref)[0] <= 0.0 || linalg::eigvalsh(&h_ref)[0] <= 0.0 {
                    continue;
                }
                compared += 1;
                assert!(linalg::max_abs(&(out.rho.matrix() - r_ref)) < 1e-12);
                assert!(linalg::max_abs(&(out.rho_hat.matrix() - h_ref)) < 1e-12);
            }
        }
        assert!(compared >= 25, "{compared}");
    }

    #[test]
    fn vector_fields_preserve_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = rotated_qutrit();
        let t = SuperoperatorTerms::new(&model);
        for _ in 0..50 {
            let rho = DensityMatrix::random_interior(3, &mut rng).into_matrix();
            assert!(linalg::trace(&t.lindblad_drift(&rho, 1.3, model.actual())).norm() < 1e-12);
            assert!(linalg::trace(&t.diffusion(0, &rho, model.estimated())).norm() < 1e-12);
            assert!(linalg::trace(&t.strat_drift(&rho, 1.3, model.actual())).norm() < 1e-12);
        }
    }

    /// Itô drift minus half the diffusion self-derivative equals the
    /// Stratonovich drift plus Σ√(ηγ)Tr((L+Lᴴ)ρ)𝓖ᵏ(ρ); the derivative is taken
    /// by central differences.
    #[test]
    fn stratonovich_correction_by_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for model in [two_channel(), rotated_qutrit()] {
            let t = SuperoperatorTerms::new(&model);
            let p = model.actual();
            let n = model.dim();
            for _ in 0..10 {
                let rho = DensityMatrix::random_interior(n, &mut rng).into_matrix();
                let mut lhs = t.lindblad_drift(&rho, 0.4, p);
                let mut rhs = t.strat_drift(&rho, 0.4, p);
                for k in 0..model.num_channels() {
                    let g = t.diffusion(k, &rho, p);
                    let h = 1e-5;
                    let up = t.diffusion(k, &(&rho + &g * C64::new(h, 0.0)), p);
                    let dn = t.diffusion(k, &(&rho - &g * C64::new(h, 0.0)), p);
                    lhs -= (up - dn) * C64::new(0.25 / h, 0.0);
                    rhs += g * C64::new(p.amplitude(k) * t.measurement_mean(k, &rho), 0.0);
                }
                assert!(linalg::max_abs(&(lhs - rhs)) < 1e-8);
            }
        }
    }

    #[test]
    fn invariant_subspace_state_is_fixed() {
        let model = two_channel();
        let s = spectral_structure(&model).unwrap();
        for p in &s.projections {
            let rho = DensityMatrix::supported_on(p);
            let st = CoupledState::new(rho.clone(), rho.clone(), None, 2);
            let out = step_coupled_ito(&st, &model, 0.0, 0.0, &[0.0, 0.0], 1e-3).unwrap();
            assert!(linalg::max_abs(&(out.rho.matrix() - rho.matrix())) < 1e-15);
            assert!(linalg::max_abs(&(out.rho_hat.matrix() - rho.matrix())) < 1e-15);
        }
    }

    #[test]
    fn filter_from_record_replays_coupled_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = rotated_qutrit();
        let mut st = CoupledState::new(
            DensityMatrix::random_interior(3, &mut rng),
            DensityMatrix::random_interior(3, &mut rng),
            None,
            1,
        );
        let mut replay = st.rho_hat.clone();
        let dt: f64 = 1e-3;
        for i in 0..200 {
            let dw = [dt.sqrt() * gauss(&mut rng)];
            let u = (i as f64 * 0.1).sin();
            let y0 = st.y[0];
            st = step_coupled_ito(&st, &model, u, u, &dw, dt).unwrap();
            replay = step_filter_from_record(&replay, &model, u, &[st.y[0] - y0], dt).unwrap();
        }
        assert!(linalg::max_abs(&(replay.matrix() - st.rho_hat.matrix())) < 1e-12);
    }

    #[test]
    fn filter_is_exact_with_matching_parameters_and_initial_state() {
        let (jx, jz) = spin_matrices(3);
        let p = ParameterSet::uniform(1.0, 1.0, 0.8, 1);
        let model = build_model(CMatrix::zeros(4, 4), jx, vec![jz], p.clone(), p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rho = DensityMatrix::random_interior(4, &mut rng);
        let mut stepper = FrameStepper::new(&model);
        let mut fs = stepper.frame_state(&CoupledState::new(rho.clone(), rho, None, 1));
        let mut audit = InvariantAudit::default();
        let dt: f64 = 1e-4;
        for _ in 0..10_000 {
            let dw = [dt.sqrt() * gauss(&mut rng)];
            stepper.step_coupled(&mut fs, 1.0, 1.0, &dw, dt, &mut audit).unwrap();
        }
        let gap = fs.rho.iter().zip(&fs.rho_hat).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(gap <= 1e-8, "gap {gap}");
    }

    #[test]
    fn reduced_filter_examples() {
        let p = ParameterSet::uniform(1.0, 1.0, 1.0, 1);
        let model = build_model(pauli_z(), pauli_x(), vec![pauli_z()], p.clone(), p).unwrap();
        let s = spectral_structure(&model).unwrap();
        assert_eq!(step_reduced_filter(&[1.0, 0.0], &model, &s, &[0.37], 1e-3).unwrap(), vec![1.0, 0.0]);
        // Uniform q̂ with 𝔩 = ±1: Λ = 0 and dq̂₁ = 2q̂₁dY.
        let q = step_reduced_filter(&[0.5, 0.5], &model, &s, &[0.01], 1e-3).unwrap();
        assert!((q[0] - (0.5 + 2.0 * 0.5 * 0.01)).abs() < 1e-15);
        assert!((q[0] + q[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reduced_filter_raw_sum_is_preserved() {
        let model = two_channel();
        let s = spectral_structure(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut stepper = FrameStepper::new(&model);
        for _ in 0..100 {
            let mut q: Vec<f64> = (0..4).map(|_| rand::Rng::random_range(&mut rng, 0.01..1.0)).collect();
            let total: f64 = q.iter().sum();
            q.iter_mut().for_each(|x| *x /= total);
            let dy = [0.03 * gauss(&mut rng), 0.03 * gauss(&mut rng)];
            let mut audit = InvariantAudit::default();
            stepper.reduced_step(&mut q, &dy, 1e-3, &mut audit).unwrap();
            let raw: f64 = stepper.q_next.iter().sum();
            assert!((raw - 1.0).abs() < 1e-14);
        }
        let _ = s;
    }

    #[test]
    fn constant_record_selects_matching_subspace() {
        // A smooth record has no quadratic variation, so d log(p_n/p_m) = (h_n − h_m)(c − ĥ)dt
        // with h_n = 2√(η̂γ̂)Re𝔩_n: the filter mean ĥ is driven to c, and to the extreme
        // vertex when c lies outside the spectrum.
        let p = ParameterSet::uniform(1.0, 1.0, 1.0, 1);
        let model =
            build_model(CMatrix::zeros(4, 4), CMatrix::zeros(4, 4), vec![spin_matrices(3).1], p.clone(), p).unwrap();
        let s = spectral_structure(&model).unwrap();
        let h: Vec<f64> = (0..4).map(|n| 2.0 * s.re_l(0, n)).collect();
        let dt: f64 = 1e-3;
        for (c, best) in [(3.5, 0), (1.2, 1), (-0.8, 2), (-3.5, 3)] {
            let mut rho = DensityMatrix::maximally_mixed(4);
            for _ in 0..20_000 {
                rho = step_filter_from_record(&rho, &model, 0.0, &[c * dt], dt).unwrap();
            }
            let pops: Vec<f64> = s.projections.iter().map(|p| crate::model::subspace_weight(&rho, p)).collect();
            let mean: f64 = pops.iter().zip(&h).map(|(p, h)| p * h).sum();
            assert!((mean - c.clamp(-3.0, 3.0)).abs() < 0.05, "c = {c}: {pops:?}");
            assert!(pops[best] > 0.25, "c = {c}: {pops:?}");
            if c.abs() > 3.0 {
                assert!(pops[best] > 0.95, "c = {c}: {pops:?}");
            }
        }
    }

    #[test]
    fn step_rejected_for_huge_dt() {
        let p = ParameterSet::uniform(1.0, 1.0, 1.0, 1);
        let model = build_model(pauli_z(), pauli_x(), vec![pauli_z()], p.clone(), p).unwrap();
        let rho = DensityMatrix::from_diagonal(&[0.3, 0.7]).unwrap();
        let st = CoupledState::new(rho.clone(), rho, Some(vec![0.3, 0.7]), 1);
        let err = step_coupled_ito(&st, &model, 0.0, 0.0, &[5.0], 1.0).unwrap_err();
        assert!(matches!(err, DynamicsError::StepRejected { .. }));
    }

    #[test]
    fn support_system_keeps_pure_states_pure() {
        let model = two_channel().with_actual(ParameterSet::new(0.7, vec![1.0, 0.6], vec![1.0, 1.0])).unwrap();
        let model = model.with_estimated(ParameterSet::new(0.9, vec![1.3, 0.4], vec![1.0, 1.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut r = DensityMatrix::random_pure(4, &mut rng);
        let mut h = DensityMatrix::random_pure(4, &mut rng);
        for i in 0..1000 {
            let v = [(i as f64 * 0.01).cos() * 3.0, -2.0];
            (r, h) = step_deterministic_control(&r, &h, &model, 0.8, &v, 1e-3).unwrap();
        }
        assert!((r.purity() - 1.0).abs() < 1e-8);
        assert!((h.purity() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn support_system_fixes_invariant_subspaces() {
        let model = two_channel();
        let s = spectral_structure(&model).unwrap();
        let rho = DensityMatrix::supported_on(&s.projections[2]);
        let (r, h) = step_deterministic_control(&rho, &rho, &model, 0.0, &[0.0, 0.0], 1e-2).unwrap();
        assert!(linalg::max_abs(&(r.matrix() - rho.matrix())) < 1e-14);
        assert!(linalg::max_abs(&(h.matrix() - rho.matrix())) < 1e-14);
    }

    #[test]
    fn ensemble_mean_follows_ito_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let model = rotated_qutrit();
        let t = SuperoperatorTerms::new(&model);
        let rho = DensityMatrix::random_interior(3, &mut rng);
        let st = CoupledState::new(rho.clone(), rho.clone(), None, 1);
        let dt: f64 = 1e-2;
        let samples = 100_000;
        let mut stepper = FrameStepper::new(&model);
        let base = stepper.frame_state(&st);
        let mut sum = CMatrix::zeros(3, 3);
        let mut audit = InvariantAudit::default();
        for _ in 0..samples {
            let mut fs = base.clone();
            let dw = [dt.sqrt() * gauss(&mut rng)];
            stepper.step_coupled(&mut fs, 0.5, 0.5, &dw, dt, &mut audit).unwrap();
            sum += model.flat_to_lab(&fs.rho);
        }
        let mean = sum * C64::new(1.0 / samples as f64, 0.0);
        let ito = rho.matrix() + t.lindblad_drift(rho.matrix(), 0.5, model.actual()) * C64::new(dt, 0.0);
        let strat = rho.matrix() + t.strat_drift(rho.matrix(), 0.5, model.actual()) * C64::new(dt, 0.0);
        let err_ito = linalg::max_abs(&(&mean - ito));
        let err_strat = linalg::max_abs(&(&mean - strat));
        // Monte Carlo error ≈ √dt·|𝓖|/√samples ≈ 3e-4.
        assert!(err_ito < 2e-3, "ito {err_ito}");
        assert!(err_strat > 3.0 * err_ito, "strat {err_strat} vs ito {err_ito}");
    }

    #[test]
    fn open_loop_weight_is_a_martingale() {
        let p = ParameterSet::uniform(1.0, 1.0, 1.0, 1);
        let model = build_model(pauli_z(), pauli_x(), vec![pauli_z()], p.clone(), p).unwrap();
        let rho = DensityMatrix::from_diagonal(&[0.3, 0.7]).unwrap();
        let mut stepper = FrameStepper::new(&model);
        let base = stepper.frame_state(&CoupledState::new(rho.clone(), rho, None, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dt: f64 = 1e-3;
        let samples = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        let mut audit = InvariantAudit::default();
        for _ in 0..samples {
            let mut fs = base.clone();
            let dw = [dt.sqrt() * gauss(&mut rng)];
            stepper.step_coupled(&mut fs, 0.0, 0.0, &dw, dt, &mut audit).unwrap();
            sum += fs.rho[0].re;
            sq += fs.rho[0].re * fs.rho[0].re;
        }
        let mean = sum / samples as f64;
        let se = ((sq / samples as f64 - mean * mean) / samples as f64).sqrt();
        assert!((mean - 0.3).abs() < 4.0 * se, "{mean} ± {se}");
    }
}
