//! Parallel Monte Carlo batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{
    self, distance_from_pops, escape_time_stats, estimate_exponent, tally_convergence, ConvergenceTally,
    DistanceSeries, EscapeSummary, ExponentEstimate,
};
use crate::conditions::{check_parameter_domain, ConditionReport};
use crate::dynamics::{CoupledState, FrameStepper, InvariantAudit};
use crate::feedback::{complement, FeedbackLaw, LawKind};
use crate::model::{spectral_structure, DensityMatrix, QndModel, SpectralStructure};

use super::config::{mixture, ExperimentConfig, FilterMode, InitialStates};
use super::HarnessError;

/// One simulated path, sampled every `record_interval`. Population blocks are
/// row-major `samples × M`, observation blocks `samples × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub subspaces: usize,
    pub channels: usize,
    /// Subspace distances refer to: the target, or the terminal subspace in open loop.
    pub reference: usize,
    pub t: Vec<f64>,
    pub pops: Vec<f64>,
    pub pops_hat: Vec<f64>,
    pub q_hat: Option<Vec<f64>>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub filter_gap_max: Option<f64>,
    pub escape_from: Option<usize>,
    pub exit_time: Option<f64>,
    pub audit: InvariantAudit,
    pub error: Option<String>,
}

impl Trajectory {
    pub fn samples(&self) -> usize {
        self.t.len()
    }

    pub fn pops_at(&self, i: usize) -> &[f64] {
        &self.pops[i * self.subspaces..(i + 1) * self.subspaces]
    }

    pub fn pops_hat_at(&self, i: usize) -> &[f64] {
        &self.pops_hat[i * self.subspaces..(i + 1) * self.subspaces]
    }

    pub fn q_hat_at(&self, i: usize) -> Option<&[f64]> {
        self.q_hat.as_ref().map(|q| &q[i * self.subspaces..(i + 1) * self.subspaces])
    }

    pub fn terminal_pops(&self) -> &[f64] {
        self.pops_at(self.samples() - 1)
    }

    /// E_n(ρ), and E_n of the filter driving the law (q̂ when `use_q`).
    pub fn distances_at(&self, i: usize, n: usize, use_q: bool) -> (f64, f64) {
        let filt = match (use_q, self.q_hat_at(i)) {
            (true, Some(q)) => distance_from_pops(q, n),
            _ => distance_from_pops(self.pops_hat_at(i), n),
        };
        (distance_from_pops(self.pops_at(i), n), filt)
    }

    pub fn distance_series(&self, n: usize, use_q: bool) -> DistanceSeries {
        let d = (0..self.samples())
            .map(|i| {
                let (a, b) = self.distances_at(i, n, use_q);
                a + b
            })
            .collect();
        DistanceSeries { t: self.t.clone(), d }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub master_seed: u64,
    pub n_trajectories: usize,
    pub dt: f64,
    pub horizon: f64,
    pub target: usize,
    pub law: LawKind,
    pub filter_mode: FilterMode,
    /// The control reads q̂ rather than ρ̂.
    pub law_uses_reduced_filter: bool,
    pub warnings: Vec<String>,
    pub conditions: Option<ConditionReport>,
    pub conditions_error: Option<String>,
    /// Some hypothesis relevant to the chosen law failed; the run still proceeds.
    pub conditions_flagged: bool,
    pub tally: ConvergenceTally,
    pub target_fraction: f64,
    /// Trajectories with E_n̄(ρ) and |q̂ − e_n̄|₁ below the tally threshold (reduced filter runs).
    pub joint_converged: Option<usize>,
    pub exponent: Option<ExponentEstimate>,
    pub exponent_error: Option<String>,
    /// Theoretical upper bound on the exponent for this run.
    pub exponent_bound: Option<f64>,
    pub escape: Option<EscapeSummary>,
    pub filter_gap_max: Option<f64>,
    pub audit: InvariantAudit,
    pub hard_violations: u64,
    pub failed_trajectories: usize,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub summary: Summary,
    pub trajectories: Vec<Trajectory>,
}

impl ExperimentResult {
    /// Zero hard invariant violations and no aborted trajectory.
    pub fn is_clean(&self) -> bool {
        self.summary.hard_violations == 0 && self.summary.failed_trajectories == 0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; None uses the global rayon pool.
    pub threads: Option<usize>,
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a QndModel,
    spectral: &'a SpectralStructure,
    law: &'a FeedbackLaw,
}

/// Per-trajectory RNG: stream `id` of the master seed.
pub fn trajectory_rng(master_seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(id as u64);
    rng
}

/// States with E_n(ρ) = E_n̄(ρ̂) = distance/2, off-target weight spread evenly.
pub fn escape_states(
    spectral: &SpectralStructure,
    from: usize,
    target: usize,
    distance: f64,
) -> Result<(DensityMatrix, DensityMatrix), HarnessError> {
    let m = spectral.num_subspaces();
    let miss = (0.5 * distance).powi(2);
    if miss > 1.0 {
        return Err(HarnessError::Config("escape distance too large".into()));
    }
    let near = |s: usize| {
        let w: Vec<f64> = (0..m).map(|j| if j == s { 1.0 - miss } else { miss / (m - 1) as f64 }).collect();
        mixture(spectral, &w)
    };
    Ok((near(from)?, near(target)?))
}

fn initial_state(
    ctx: &Context,
    id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(DensityMatrix, DensityMatrix, Option<usize>), HarnessError> {
    let (model, spectral) = (ctx.model, ctx.spectral);
    let n = model.dim();
    Ok(match &ctx.cfg.initial_states {
        InitialStates::Fixed { rho, rho_hat } => {
            (rho.build(model, spectral, rng)?, rho_hat.build(model, spectral, rng)?, None)
        }
        InitialStates::RandomInterior => {
            (DensityMatrix::random_interior(n, rng), DensityMatrix::random_interior(n, rng), None)
        }
        InitialStates::RandomBoundary => (DensityMatrix::random_pure(n, rng), DensityMatrix::random_pure(n, rng), None),
        InitialStates::Escape { from, distance } => {
            let target = ctx.cfg.target;
            let from = match from {
                Some(f) => {
                    spectral.check_target(*f)?;
                    if *f == target {
                        return Err(HarnessError::Config("escape.from must differ from the target".into()));
                    }
                    *f
                }
                None => {
                    let others: Vec<usize> = (0..spectral.num_subspaces()).filter(|&j| j != target).collect();
                    others[id % others.len()]
                }
            };
            let (r, h) = escape_states(spectral, from, target, *distance)?;
            (r, h, Some(from))
        }
    })
}

fn simulate(ctx: &Context, id: usize) -> Result<Trajectory, HarnessError> {
    let cfg = ctx.cfg;
    let (model, spectral, law) = (ctx.model, ctx.spectral, ctx.law);
    let big_m = spectral.num_subspaces();
    let m = model.num_channels();
    let target = cfg.target;
    let mut rng = trajectory_rng(cfg.master_seed, id);
    let (rho0, hat0, escape_from) = initial_state(ctx, id, &mut rng)?;
    let with_q = cfg.filter_mode != FilterMode::Full;
    let q0 = with_q.then(|| analysis::populations(&hat0, spectral));
    let hat0_on_target = complement(&analysis::populations(&hat0, spectral), target) <= 1e-12;
    let mut stepper = FrameStepper::new(model);
    let mut fs = stepper.frame_state(&CoupledState::new(rho0, hat0, q0, m));

    let n_steps = (cfg.horizon / cfg.dt).round() as u64;
    let every = ((cfg.record_interval / cfg.dt).round() as u64).max(1);
    let cap = (n_steps / every + 2) as usize;
    let mut tr = Trajectory {
        id,
        subspaces: big_m,
        channels: m,
        reference: target,
        t: Vec::with_capacity(cap),
        pops: Vec::with_capacity(cap * big_m),
        pops_hat: Vec::with_capacity(cap * big_m),
        q_hat: with_q.then(|| Vec::with_capacity(cap * big_m)),
        u: Vec::with_capacity(cap),
        y: Vec::with_capacity(cap * m),
        filter_gap_max: (cfg.filter_mode == FilterMode::Both).then_some(0.0),
        escape_from,
        exit_time: None,
        audit: InvariantAudit { min_pre_clip_eigenvalue: f64::INFINITY, ..Default::default() },
        error: None,
    };
    let (mut p, mut ph) = (vec![0.0; big_m], vec![0.0; big_m]);
    let mut dw = vec![0.0; m];
    let sqrt_dt = cfg.dt.sqrt();
    let law_on_q = law.uses_reduced_filter();
    let mut reached = false;
    for step in 0..=n_steps {
        let t = step as f64 * cfg.dt;
        model.populations_flat(&fs.rho, &mut p);
        model.populations_flat(&fs.rho_hat, &mut ph);
        let filt: &[f64] = if law_on_q { fs.q_hat.as_deref().unwrap() } else { &ph };
        let (u, saturated) = law.evaluate(filt, spectral);
        if let (Some(gap), Some(q)) = (tr.filter_gap_max.as_mut(), fs.q_hat.as_ref()) {
            *gap = ph.iter().zip(q).fold(*gap, |g, (a, b)| g.max((a - b).abs()));
        }
        if !hat0_on_target && !reached && complement(&ph, target) <= 1e-12 {
            reached = true;
            tr.audit.never_reach_events += 1;
        }
        let exited = match (&cfg.escape, escape_from) {
            (Some(e), Some(from)) => distance_from_pops(&p, from) + distance_from_pops(filt, target) >= e.lambda,
            _ => false,
        };
        if step % every == 0 || step == n_steps || exited {
            tr.t.push(t);
            tr.pops.extend_from_slice(&p);
            tr.pops_hat.extend_from_slice(&ph);
            if let (Some(rec), Some(q)) = (tr.q_hat.as_mut(), fs.q_hat.as_ref()) {
                rec.extend_from_slice(q);
            }
            tr.u.push(u);
            tr.y.extend_from_slice(&fs.y);
        }
        if exited {
            tr.exit_time = Some(t);
            break;
        }
        if step == n_steps {
            break;
        }
        if saturated {
            tr.audit.saturation_events += 1;
        }
        for x in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = z * sqrt_dt;
        }
        if let Err(e) = stepper.step_coupled(&mut fs, u, u, &dw, cfg.dt, &mut tr.audit) {
            tr.error = Some(format!("t = {t}: {e}"));
            break;
        }
    }
    if cfg.law.kind == LawKind::OpenLoop {
        let last = tr.terminal_pops();
        tr.reference = (0..big_m).max_by(|&a, &b| last[a].total_cmp(&last[b])).unwrap_or(target);
    }
    Ok(tr)
}

/// Verdicts that matter for the chosen law.
fn relevant_verdicts(kind: LawKind) -> &'static [&'static str] {
    match kind {
        LawKind::OpenLoop => &["H0"],
        LawKind::SpecialFull | LawKind::SpecialReduced => {
            &["H0", "H3", "condition_parameter", "instability_s1", "rate_bonus_applicable"]
        }
        LawKind::GeneralFull | LawKind::GeneralReduced => {
            &["H0", "H3", "condition_parameter", "instability_general", "parameter_g"]
        }
        LawKind::Custom => &["H0", "H3"],
    }
}

pub fn run_batch(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentResult, HarnessError> {
    let model = cfg.model.build(None)?;
    let spectral = spectral_structure(&model)?;
    spectral.check_target(cfg.target)?;
    let warnings = cfg.validate(&model)?;
    let law = cfg.law.build(cfg.target, model.num_channels())?;
    let (conditions, conditions_error) = match check_parameter_domain(&model, &spectral, cfg.target) {
        Ok(mut r) => {
            r.h4.user_asserted = cfg.h4_asserted;
            (Some(r), None)
        }
        Err(e) => (None, Some(e.to_string())),
    };
    let conditions_flagged = match &conditions {
        Some(r) => {
            let v = r.verdicts();
            relevant_verdicts(cfg.law.kind).iter().any(|name| !v.iter().any(|(n, ok)| n == name && *ok))
        }
        None => true,
    };

    let ctx = Context { cfg, model: &model, spectral: &spectral, law: &law };
    let run = || (0..cfg.n_trajectories).into_par_iter().map(|id| simulate(&ctx, id)).collect::<Result<Vec<_>, _>>();
    let trajectories = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let summary = summarize(
        cfg,
        &model,
        &spectral,
        law.uses_reduced_filter(),
        &trajectories,
        warnings,
        conditions,
        conditions_error,
        conditions_flagged,
    );
    Ok(ExperimentResult { summary, trajectories })
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    cfg: &ExperimentConfig,
    model: &QndModel,
    spectral: &SpectralStructure,
    use_q: bool,
    trajectories: &[Trajectory],
    warnings: Vec<String>,
    conditions: Option<ConditionReport>,
    conditions_error: Option<String>,
    conditions_flagged: bool,
) -> Summary {
    let big_m = spectral.num_subspaces();
    let threshold = cfg.analysis.tally_threshold;
    let terminal: Vec<Vec<f64>> = trajectories.iter().map(|t| t.terminal_pops().to_vec()).collect();
    let tally = tally_convergence(&terminal, big_m, threshold);
    let target_fraction = tally.fraction(cfg.target);
    let joint_converged = (cfg.filter_mode != FilterMode::Full).then(|| {
        trajectories
            .iter()
            .filter(|t| {
                let last = t.samples() - 1;
                let q = t.q_hat_at(last).unwrap();
                let l1: f64 = 2.0 * complement(q, cfg.target);
                distance_from_pops(t.terminal_pops(), cfg.target) < threshold && l1 < threshold
            })
            .count()
    });
    let (exponent, exponent_error, exponent_bound) = if cfg.escape.is_some() {
        (None, None, None)
    } else {
        let series: Vec<DistanceSeries> = trajectories.iter().map(|t| t.distance_series(t.reference, use_q)).collect();
        let bound = if cfg.law.kind == LawKind::OpenLoop {
            Some(analysis::qsr_rate_bound(model, spectral))
        } else {
            conditions.as_ref().map(|c| c.exponent_bound)
        };
        match estimate_exponent(&series, cfg.analysis.burn_in_fraction * cfg.horizon, cfg.analysis.floor) {
            Ok(e) => (Some(e), None, bound),
            Err(e) => (None, Some(e.to_string()), bound),
        }
    };
    let escape =
        cfg.escape.as_ref().map(|_| escape_time_stats(&trajectories.iter().map(|t| t.exit_time).collect::<Vec<_>>()));
    let filter_gap_max = (cfg.filter_mode == FilterMode::Both)
        .then(|| trajectories.iter().filter_map(|t| t.filter_gap_max).fold(0.0, f64::max));
    let mut audit = InvariantAudit { min_pre_clip_eigenvalue: f64::INFINITY, ..Default::default() };
    for t in trajectories {
        audit.merge(&t.audit);
    }
    let failed = trajectories.iter().filter(|t| t.error.is_some()).count();
    Summary {
        name: cfg.name.clone(),
        master_seed: cfg.master_seed,
        n_trajectories: cfg.n_trajectories,
        dt: cfg.dt,
        horizon: cfg.horizon,
        target: cfg.target,
        law: cfg.law.kind,
        filter_mode: cfg.filter_mode,
        law_uses_reduced_filter: use_q,
        warnings,
        conditions,
        conditions_error,
        conditions_flagged,
        tally,
        target_fraction,
        joint_converged,
        exponent,
        exponent_error,
        exponent_bound,
        escape,
        filter_gap_max,
        hard_violations: audit.hard_violations(),
        audit,
        failed_trajectories: failed,
        config: cfg.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenarios;

    fn small(name: &str, n: usize, horizon: f64) -> ExperimentConfig {
        let mut c = scenarios::by_name(name).unwrap();
        c.n_trajectories = n;
        c.horizon = horizon;
        c.dt = 1e-3;
        c
    }

    #[test]
    fn same_seed_same_summary_and_thread_independence() {
        let c = small("spin-special-reduced", 4, 1.0);
        let a = run_batch(&c, RunOptions { threads: Some(1) }).unwrap();
        let b = run_batch(&c, RunOptions { threads: Some(3) }).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        let ja = serde_json::to_string(&a.summary).unwrap();
        let jb = serde_json::to_string(&b.summary).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn trajectories_use_independent_streams() {
        let c = small("qubit-openloop", 6, 0.5);
        let r = run_batch(&c, RunOptions::default()).unwrap();
        let mut c2 = c.clone();
        c2.n_trajectories = 3;
        let r2 = run_batch(&c2, RunOptions::default()).unwrap();
        // A trajectory does not depend on how many others run.
        assert_eq!(r.trajectories[..3], r2.trajectories[..]);
        assert_ne!(r.trajectories[0].pops, r.trajectories[1].pops);
    }

    #[test]
    fn invariant_start_stays_put() {
        let mut c = small("spin-special", 3, 0.5);
        c.initial_states = InitialStates::Fixed {
            rho: super::super::config::StateSpec::Subspace(1),
            rho_hat: super::super::config::StateSpec::Subspace(1),
        };
        let r = run_batch(&c, RunOptions::default()).unwrap();
        assert_eq!(r.summary.tally.counts[1], 3);
        for t in &r.trajectories {
            assert!(t.u.iter().all(|&u| u == 0.0));
        }
    }

    #[test]
    fn zero_lambda_exits_immediately() {
        let mut c = small("escape-qubit-s1", 3, 1.0);
        c.escape.as_mut().unwrap().lambda = 0.0;
        let r = run_batch(&c, RunOptions::default()).unwrap();
        let e = r.summary.escape.unwrap();
        assert_eq!(e.exited, 3);
        assert_eq!(e.max, Some(0.0));
    }

    #[test]
    fn escape_states_have_requested_distance() {
        let model = crate::harness::config::ModelConfig::stock("spin32").build(None).unwrap();
        let s = spectral_structure(&model).unwrap();
        let (r, h) = escape_states(&s, 0, 1, 0.05).unwrap();
        let d = distance_from_pops(&analysis::populations(&r, &s), 0)
            + distance_from_pops(&analysis::populations(&h, &s), 1);
        assert!((d - 0.05).abs() < 1e-12);
    }

    #[test]
    fn both_mode_reports_filter_gap() {
        let c = small("two-channel-general-reduced", 2, 0.5);
        let r = run_batch(&c, RunOptions::default()).unwrap();
        let g = r.summary.filter_gap_max.unwrap();
        assert!(g.is_finite() && g >= 0.0);
        assert!(r.trajectories.iter().all(|t| t.filter_gap_max.is_some()));
    }
}
