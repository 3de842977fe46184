//! Hypotheses, parameter-domain inequalities and rate constants for a
//! target subspace `n̄`.
//!
//! Every inequality is evaluated with zero slack and reported together with
//! both sides so callers can apply their own margin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::feedback::FeedbackLaw;
use crate::linalg::{self, CMatrix};
use crate::model::{ModelError, QndModel, SpectralStructure};

/// Index sets 𝒦̄⁺, 𝒦⁺, 𝒦̄⁻, 𝒦⁻ (0-based channel indices).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexSets {
    pub k_bar_plus: Vec<usize>,
    pub k_plus: Vec<usize>,
    pub k_bar_minus: Vec<usize>,
    pub k_minus: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateConstants {
    pub target: usize,
    /// C̄_{k,n̄} = Re𝔩_{k,n̄} − min_{n≠n̄} Re𝔩_{k,n}
    pub c_bar: Vec<f64>,
    /// C̲_{k,n̄} = Re𝔩_{k,n̄} − max_{n≠n̄} Re𝔩_{k,n}
    pub c_under: Vec<f64>,
    /// Upper bound of the innovation gap near I(H_n)×I(H_n̄), n ≠ n̄.
    pub t_bar: Vec<f64>,
    /// Lower bound of the same.
    pub t_under: Vec<f64>,
    pub k_sets: IndexSets,
    pub d_nbar: f64,
    pub big_c: f64,
    pub big_k: f64,
}

pub fn rate_constants(
    model: &QndModel,
    spectral: &SpectralStructure,
    target: usize,
) -> Result<RateConstants, ModelError> {
    spectral.check_target(target)?;
    let m = model.num_channels();
    let big_m = spectral.num_subspaces();
    let (act, est) = (model.actual(), model.estimated());
    let mut c_bar = Vec::with_capacity(m);
    let mut c_under = Vec::with_capacity(m);
    let mut t_bar = Vec::with_capacity(m);
    let mut t_under = Vec::with_capacity(m);
    for k in 0..m {
        let own = spectral.re_l(k, target);
        let others = (0..big_m).filter(|&n| n != target).map(|n| spectral.re_l(k, n));
        let (lo, hi) = others.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        let cb = own - lo;
        let cu = own - hi;
        let (a, r) = (act.amplitude(k), est.amplitude(k));
        c_bar.push(cb);
        c_under.push(cu);
        t_bar.push(a * (own - cu) - r * own);
        t_under.push(a * (own - cb) - r * own);
    }

    let k_bar_plus: Vec<usize> = (0..m).filter(|&k| t_under[k] > 0.0).collect();
    let k_plus: Vec<usize> = k_bar_plus.iter().copied().filter(|&k| c_bar[k] < 0.0).collect();
    let k_bar_minus: Vec<usize> = (0..m).filter(|&k| t_bar[k] < 0.0).collect();
    let k_minus: Vec<usize> = k_bar_minus.iter().copied().filter(|&k| c_under[k] > 0.0).collect();

    let r = |k: usize| est.amplitude(k);
    let mut d = 0.0;
    for &k in &k_plus {
        d += r(k) * c_bar[k].abs() * t_under[k];
    }
    for &k in &k_minus {
        d += r(k) * c_under[k] * t_bar[k].abs();
    }
    for &k in k_bar_plus.iter().filter(|k| !k_plus.contains(k)) {
        d -= r(k) * c_bar[k] * t_bar[k];
    }
    for &k in k_bar_minus.iter().filter(|k| !k_minus.contains(k)) {
        d -= r(k) * c_under[k] * t_under[k];
    }

    let (lhs, penalty) = parameter_condition_sides(model, spectral, target);
    let min_actual = (0..m).map(|k| act.efficiency_rate(k) * spectral.ell_min[k]).fold(f64::INFINITY, f64::min);
    let big_c = 0.5 * min_actual.min(lhs - penalty);

    let sum_sq = |p: &crate::model::ParameterSet| {
        (0..m).map(|k| p.efficiency_rate(k) * spectral.bold_ell_min[k].powi(2)).sum::<f64>()
    };
    let big_k = sum_sq(act).min(sum_sq(est)) / (2.0 * (big_m as f64 - 1.0));

    Ok(RateConstants {
        target,
        c_bar,
        c_under,
        t_bar,
        t_under,
        k_sets: IndexSets { k_bar_plus, k_plus, k_bar_minus, k_minus },
        d_nbar: d,
        big_c,
        big_k,
    })
}

/// (min_k η̂γ̂ℓ̲_k, 4Σ_k ℓ̄_k|Re𝔩_{k,n̄}|√(η̂γ̂)|√(ηγ) − √(η̂γ̂)|)
fn parameter_condition_sides(model: &QndModel, spectral: &SpectralStructure, target: usize) -> (f64, f64) {
    let (act, est) = (model.actual(), model.estimated());
    let m = model.num_channels();
    let lhs = (0..m).map(|k| est.efficiency_rate(k) * spectral.ell_min[k]).fold(f64::INFINITY, f64::min);
    let rhs = (0..m)
        .map(|k| {
            let (a, r) = (act.amplitude(k), est.amplitude(k));
            4.0 * spectral.ell_max[k] * spectral.re_l(k, target).abs() * r * (a - r).abs()
        })
        .sum();
    (lhs, rhs)
}

/// `lhs < rhs` with both sides exposed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Inequality {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl Inequality {
    fn less(lhs: f64, rhs: f64) -> Self {
        Inequality { lhs, rhs, holds: lhs < rhs }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct H3Verdict {
    pub holds: bool,
    pub l_used: Option<usize>,
    pub max_l: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct S1Verdict {
    /// 𝒦̄⁺ ∪ 𝒦̄⁻ covers every channel.
    pub covers_all_channels: bool,
    /// D_n̄ against Σ_k η̂γ̂ max{C̄², C̲²}, oriented as `rhs < lhs`.
    pub d_nbar: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `lower < value ≤ upper` for one channel.
#[derive(Debug, Clone, Serialize)]
pub struct G1Channel {
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum G2Case {
    /// ℓ̲² > |Re𝔩_{k,n̄}|ℓ̄
    GapDominates,
    Balanced,
    /// ℓ̲² < |Re𝔩_{k,n̄}|ℓ̄
    SpreadDominates,
}

/// `lower ≤ value ≤ upper` (upper may be +∞) for one channel.
#[derive(Debug, Clone, Serialize)]
pub struct G2Channel {
    pub case: G2Case,
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParameterGChannel {
    /// √(ηγ)·2(Re𝔩 − ℓ̲) < √(η̂γ̂)·2(Re𝔩 + ℓ̲)
    pub forward: Inequality,
    /// √(η̂γ̂)·2(Re𝔩 − ℓ̲) < √(ηγ)·2(Re𝔩 + ℓ̲)
    pub backward: Inequality,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct H4Status {
    /// H4 cannot be decided algorithmically; this is whatever the user asserts.
    pub user_asserted: bool,
    pub probe: Option<H4Probe>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub target: usize,
    pub h0: bool,
    pub h3: H3Verdict,
    pub condition_parameter: Inequality,
    pub instability_s1: S1Verdict,
    pub instability_g1: Vec<G1Channel>,
    pub instability_g2: Vec<G2Channel>,
    /// Every channel satisfies G1 or G2.
    pub instability_general: bool,
    pub parameter_g: Vec<ParameterGChannel>,
    pub parameter_g_holds: bool,
    /// C̄_{k,n̄} ≤ 0 or C̲_{k,n̄} ≥ 0 for every k.
    pub rate_bonus_applicable: bool,
    /// −C_n̄ − K when the bonus applies, else −C_n̄.
    pub exponent_bound: f64,
    pub rate_constants: RateConstants,
    pub h4: H4Status,
}

impl ConditionReport {
    /// Verdicts as (name, value) pairs, for printing.
    pub fn verdicts(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("H0", self.h0),
            ("H3", self.h3.holds),
            ("condition_parameter", self.condition_parameter.holds),
            ("instability_s1", self.instability_s1.holds),
            ("instability_g1", self.instability_g1.iter().all(|c| c.holds)),
            ("instability_g2", self.instability_g2.iter().all(|c| c.holds)),
            ("instability_general", self.instability_general),
            ("parameter_g", self.parameter_g_holds),
            ("rate_bonus_applicable", self.rate_bonus_applicable),
            ("H4 (user asserted)", self.h4.user_asserted),
        ]
    }
}

/// Builds the rank matrices M_{l,ξ} for every basis vector and returns the
/// smallest l at which all of them have full rank.
pub fn check_h3(model: &QndModel, max_l: usize) -> H3Verdict {
    let n = model.dim();
    let h1 = model.h1();
    let mut l_used = None;
    'outer: for l in 1..=max_l.max(1) {
        for c in 0..n {
            let xi = model.basis().column(c).into_owned();
            let mut cols = vec![xi.clone(), h1 * &xi];
            let mut power = xi.clone();
            for _ in 1..=l {
                power = h1 * power;
                for lk in model.ls() {
                    cols.push(lk.adjoint() * &power);
                }
            }
            let mat = CMatrix::from_columns(&cols);
            if linalg::rank(&mat, 1e-10) < n {
                continue 'outer;
            }
        }
        l_used = Some(l);
        break;
    }
    H3Verdict { holds: l_used.is_some(), l_used, max_l }
}

pub fn check_parameter_domain(
    model: &QndModel,
    spectral: &SpectralStructure,
    target: usize,
) -> Result<ConditionReport, ModelError> {
    let rc = rate_constants(model, spectral, target)?;
    let m = model.num_channels();
    let (act, est) = (model.actual(), model.estimated());

    let (lhs, rhs) = parameter_condition_sides(model, spectral, target);
    // Stated as min η̂γ̂ℓ̲ > RHS; stored as RHS < LHS.
    let condition_parameter = Inequality { lhs, rhs, holds: rhs < lhs };

    let bound: f64 = (0..m).map(|k| est.efficiency_rate(k) * rc.c_bar[k].powi(2).max(rc.c_under[k].powi(2))).sum();
    let covers = (0..m).all(|k| rc.k_sets.k_bar_plus.contains(&k) || rc.k_sets.k_bar_minus.contains(&k));
    let instability_s1 =
        S1Verdict { covers_all_channels: covers, d_nbar: rc.d_nbar, bound, holds: covers && rc.d_nbar > bound };

    let mut g1 = Vec::with_capacity(m);
    let mut g2 = Vec::with_capacity(m);
    let mut pg = Vec::with_capacity(m);
    for k in 0..m {
        let lmin = spectral.ell_min[k];
        let lmax = spectral.ell_max[k];
        let re = spectral.re_l(k, target);
        let spread = re.abs() * lmax;
        let gap2 = lmin * lmin;
        let ratio = (act.efficiency_rate(k) / est.efficiency_rate(k)).sqrt();

        let lower = 1.0 - gap2 / (2.0 * (gap2 + spread));
        g1.push(G1Channel { lower, value: ratio, upper: 1.0, holds: lower < ratio && ratio <= 1.0 });

        let (case, lo, hi) = if gap2 > spread {
            (G2Case::GapDominates, 1.0 + gap2 / (2.0 * (gap2 - spread)), f64::INFINITY)
        } else if gap2 == spread {
            (G2Case::Balanced, 1.0, f64::INFINITY)
        } else {
            (G2Case::SpreadDominates, 1.0, 1.0 + gap2 / (2.0 * (spread - gap2)))
        };
        g2.push(G2Channel { case, lower: lo, value: ratio, upper: hi, holds: lo <= ratio && ratio <= hi });

        let (a, r) = (act.amplitude(k), est.amplitude(k));
        let forward = Inequality::less(a * 2.0 * (re - lmin), r * 2.0 * (re + lmin));
        let backward = Inequality::less(r * 2.0 * (re - lmin), a * 2.0 * (re + lmin));
        pg.push(ParameterGChannel { holds: forward.holds && backward.holds, forward, backward });
    }
    let instability_general = g1.iter().zip(&g2).all(|(a, b)| a.holds || b.holds);
    let parameter_g_holds = pg.iter().all(|c| c.holds);
    let rate_bonus_applicable = (0..m).all(|k| rc.c_bar[k] <= 0.0 || rc.c_under[k] >= 0.0);
    let exponent_bound = if rate_bonus_applicable { -rc.big_c - rc.big_k } else { -rc.big_c };

    Ok(ConditionReport {
        target,
        // Enforced when the model was built.
        h0: true,
        h3: check_h3(model, 2 * model.dim()),
        condition_parameter,
        instability_s1,
        instability_g1: g1,
        instability_g2: g2,
        instability_general,
        parameter_g: pg,
        parameter_g_holds,
        rate_bonus_applicable,
        exponent_bound,
        rate_constants: rc,
        h4: H4Status { user_asserted: false, probe: None },
    })
}

type VectorField<'a> = Box<dyn Fn(&CMatrix) -> CMatrix + 'a>;

/// Outcome of the randomized H4 falsification probe.
#[derive(Debug, Clone, Serialize)]
pub struct H4Probe {
    /// Sampled filter states with u = 0 outside I(H_n̄).
    pub zero_points: usize,
    /// How many of them stayed in {u = 0} along every vector field for the whole probe time.
    pub stuck_points: usize,
    pub probe_time: f64,
    /// True if some sampled curve never left the zero set.
    pub falsified: bool,
}

/// Heuristic check of H4 for a full-filter law: sample estimated states on
/// which the law vanishes (away from the target), follow the drift and each
/// diffusion vector field of the filter for `probe_time`, and report points
/// whose curves never leave the zero set.
pub fn probe_h4(
    model: &QndModel,
    spectral: &SpectralStructure,
    law: &FeedbackLaw,
    samples: usize,
    probe_time: f64,
    seed: u64,
) -> H4Probe {
    use crate::dynamics::SuperoperatorTerms;
    use crate::model::DensityMatrix;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms = SuperoperatorTerms::new(model);
    let est = model.estimated();
    let target = law.target();
    let n = model.dim();
    let u_of = |m: &CMatrix| law.evaluate_matrix(m, spectral).0;
    let off_target = |m: &CMatrix| 1.0 - (m * &spectral.projections[target]).trace().re > 1e-9;

    let mut zero_points = 0;
    let mut stuck_points = 0;
    let steps = 200;
    let h = probe_time / steps as f64;
    for _ in 0..samples * 50 {
        if zero_points >= samples {
            break;
        }
        // Bias half of the candidates towards the target to hit the ε₁ region.
        let mut rho = DensityMatrix::random_interior(n, &mut rng).into_matrix();
        if rng.random_bool(0.5) {
            let w: f64 = rng.random_range(0.9..1.0);
            let p = DensityMatrix::supported_on(&spectral.projections[target]).into_matrix();
            rho = p * num_complex::Complex64::new(w, 0.0) + rho * num_complex::Complex64::new(1.0 - w, 0.0);
        }
        if u_of(&rho) != 0.0 || !off_target(&rho) {
            continue;
        }
        zero_points += 1;
        let mut fields: Vec<VectorField<'_>> = vec![Box::new(|r: &CMatrix| terms.strat_drift(r, 0.0, est))];
        for k in 0..model.num_channels() {
            let terms = &terms;
            fields.push(Box::new(move |r: &CMatrix| terms.diffusion(k, r, est)));
        }
        let mut left = false;
        for f in &fields {
            let mut x = rho.clone();
            for _ in 0..steps {
                let k1 = f(&x);
                let k2 = f(&(&x + &k1 * num_complex::Complex64::new(h / 2.0, 0.0)));
                let k3 = f(&(&x + &k2 * num_complex::Complex64::new(h / 2.0, 0.0)));
                let k4 = f(&(&x + &k3 * num_complex::Complex64::new(h, 0.0)));
                x +=
                    (k1 + k2 * num_complex::Complex64::new(2.0, 0.0) + k3 * num_complex::Complex64::new(2.0, 0.0) + k4)
                        * num_complex::Complex64::new(h / 6.0, 0.0);
                if u_of(&x) != 0.0 {
                    left = true;
                    break;
                }
            }
            if left {
                break;
            }
        }
        if !left {
            stuck_points += 1;
        }
    }
    H4Probe { zero_points, stuck_points, probe_time, falsified: stuck_points > 0 }
}

/// Random model parameters with fixed operators, for property sweeps.
pub fn random_parameters<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> crate::model::ParameterSet {
    crate::model::ParameterSet::new(
        rng.random_range(0.1..2.0),
        (0..channels).map(|_| rng.random_range(0.05..3.0)).collect(),
        (0..channels).map(|_| rng.random_range(0.05..=1.0)).collect(),
    )
}
