//! The primal-dual learning policy: two-point gradient estimation with
//! demand balancing, inexact projected gradient ascent on the Lagrangian in
//! price space, and proximal dual descent with geometrically lengthening
//! epochs.

use serde::{Deserialize, Serialize};

use crate::demand::RegularityConstants;
use crate::error::{check_dim, Error, Result};
use crate::fluid::{DualSet, Instance};
use crate::linalg::{Matrix, Vector};
use crate::projection::{BoxBounds, Halfspace, Polyhedron};
use crate::sim::{AlgorithmEvent, BalancingStatus, Environment, Policy, PriceAction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConstantsMode {
    Theory,
    #[default]
    Tuned,
    Explicit,
}

/// Step sizes, loop-length and tolerance constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningConstants {
    pub n0: u64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: Option<f64>,
    pub kappa5: f64,
    pub kappa6: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub mu: f64,
    /// Loop lengths grow as `g^{-2τ}`.
    pub contraction: f64,
}

pub const TUNED_CONTRACTION: f64 = 0.9;

/// Saturation point for loop lengths and `n₀`.
pub const MAX_LOOP: u64 = 1 << 62;

fn to_len(x: f64) -> u64 {
    if !(x < MAX_LOOP as f64) {
        MAX_LOOP
    } else {
        x.ceil().max(0.0) as u64
    }
}

/// Hand-tuned constants for `N` products and horizon `T`; the contraction
/// factor defaults to [`TUNED_CONTRACTION`].
pub fn constants_tuned(n: usize, t: u64) -> LearningConstants {
    let nf = n as f64;
    let tf = t as f64;
    let l = (nf * tf).ln();
    let l2 = (2.0 * nf * tf).ln();
    let n0 = to_len(0.1 * nf.powi(4) * l * l);
    let kappa1 = (n0 as f64).powf(0.25);
    let kappa5 = 2.0 / 3.0 * 1e-8 * (nf.powf(5.5) * l.powi(3) + nf.powi(4) * l.powi(6));
    LearningConstants {
        n0,
        kappa1,
        kappa2: kappa5.sqrt(),
        kappa3: 8.0 * kappa1 * (nf.powi(3) * l2).sqrt() + 12.0 * kappa1 * kappa1,
        kappa4: None,
        kappa5,
        kappa6: nf.sqrt(),
        eta1: 1.0,
        eta2: 1.0,
        mu: 1.0,
        contraction: TUNED_CONTRACTION,
    }
}

/// Constants from the convergence analysis, given regularity constants,
/// `λ̄ = sup_Λ ‖λ‖`, the interior margin `ρ̲` and the diameter `ρ̄` of `P`.
pub fn constants_theory(
    n: usize,
    t: u64,
    reg: &RegularityConstants,
    lambda_bar: f64,
    rho_lo: f64,
    rho_bar: f64,
) -> Result<LearningConstants> {
    theory_constants_unsaturated(n, t, reg, lambda_bar, rho_lo, rho_bar).map(|c| c.constants)
}

/// Theory constants together with `n₀` before rounding to a loop length;
/// the other constants are computed from the unsaturated value.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConstants {
    pub n0_real: f64,
    pub constants: LearningConstants,
}

pub fn theory_constants_unsaturated(
    n: usize,
    t: u64,
    reg: &RegularityConstants,
    lambda_bar: f64,
    rho_lo: f64,
    rho_bar: f64,
) -> Result<TheoryConstants> {
    reg.validate()?;
    if !(lambda_bar > 0.0 && rho_lo > 0.0 && rho_bar > 0.0) || t < 2 {
        return Err(Error::InvalidConfig(
            "λ̄, ρ̲, ρ̄ must be positive and T ≥ 2".into(),
        ));
    }
    let nf = n as f64;
    let tf = t as f64;
    let ln_t = tf.ln();
    let l2 = (2.0 * nf * tf).ln();
    let r = reg;
    let eta1 = 1.0 / (8.0 * (r.b_f + r.b_a * r.b_j * lambda_bar));
    let eta2 = r.sigma_phi / (r.b_a * r.b_a);
    let mu = r.sigma_a * r.sigma_a / r.b_phi;
    let kappa4 =
        2.0 * r.d_bar * (r.l_d * nf.sqrt()).max(r.b_f * nf.sqrt() + r.b_r) * (nf * l2).sqrt();
    let n0_a = (1.0 + r.b_a * lambda_bar).powi(4) * kappa4.powi(4) * ln_t * ln_t
        / (r.b_phi.powi(2) * r.b_d.powi(4) * rho_bar.powi(4));
    let n0_b = nf * nf / rho_lo.powi(4);
    let n0_real = n0_a.max(n0_b).ceil().max(4.0 * nf);
    let n0 = to_len(n0_real);
    let kappa1 = (8.0 * r.b_phi * r.b_d.powi(2) * rho_bar.powi(2)
        / (r.sigma_phi * r.sigma_d.powi(2)))
    .sqrt()
        * n0_real.powf(0.25);
    let kappa3 =
        4.0 * r.d_bar * r.l_d * kappa1 * (nf.powi(3) * l2).sqrt() + 3.0 * r.l_d * kappa1 * kappa1;
    let me = mu * eta2;
    let kappa6 = 2.0
        * (r.b_phi + lambda_bar * (r.b_a * r.d_bar + r.gamma_max) * nf.sqrt())
        * (1.0 + me).powf(1.5)
        / me;
    let k5_a = 32.0 * kappa3.powi(2) * kappa6.powi(2) * lambda_bar * r.b_a * ln_t * ln_t
        / (mu * mu * eta2 * r.d_bar * nf.sqrt());
    let k5_b =
        16.0 * kappa1.powi(4) * kappa6.powi(2) * lambda_bar.powi(2) * r.b_d.powi(4) * (1.0 + me)
            / (mu.powi(4) * eta2 * eta2 * r.d_bar * r.d_bar * nf);
    let kappa5 = k5_a.max(k5_b);
    let out = TheoryConstants {
        n0_real,
        constants: LearningConstants {
            n0,
            kappa1,
            kappa2: kappa5.sqrt(),
            kappa3,
            kappa4: Some(kappa4),
            kappa5,
            kappa6,
            eta1,
            eta2,
            mu,
            contraction: 1.0 - eta1 * r.sigma_d * r.sigma_d * r.sigma_phi / 2.0,
        },
    };
    if [kappa1, kappa3, kappa5, kappa6, eta1, eta2, mu]
        .iter()
        .any(|x| !(*x > 0.0) || !x.is_finite())
    {
        return Err(Error::InvalidConfig(format!(
            "theory constants are not finite and positive: {out:?}"
        )));
    }
    Ok(out)
}

/// JSON form of the policy configuration. `mode` selects the constants;
/// numeric constants may only be supplied in explicit mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdNrmConfigFile {
    #[serde(default)]
    pub mode: ConstantsMode,
    pub n0: Option<u64>,
    pub kappa1: Option<f64>,
    pub kappa2: Option<f64>,
    pub kappa3: Option<f64>,
    pub kappa4: Option<f64>,
    pub kappa5: Option<f64>,
    pub kappa6: Option<f64>,
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub mu: Option<f64>,
    pub lambda_max: Option<Vec<f64>>,
    pub contraction: Option<f64>,
    pub warm_start: Option<bool>,
    /// Initial dual iterate; defaults to the center of `Λ`.
    pub lambda0: Option<Vec<f64>>,
    /// Interior margin of `P` as a fraction of the price range.
    pub p_margin: Option<f64>,
    /// Grid points per axis for regularity estimation in theory mode.
    pub grid_points: Option<usize>,
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PdNrmConfig {
    pub mode: ConstantsMode,
    pub constants: LearningConstants,
    pub dual_set: DualSet,
    /// `ρ̲`, absolute.
    pub p_margin: f64,
    /// `ρ̄ = diam(P)`.
    pub rho_bar: f64,
    pub warm_start: bool,
    pub lambda0: Vector,
    pub horizon: u64,
}

pub const DEFAULT_P_MARGIN: f64 = 0.05;

/// `λ_max,j = ((p̲ + p̄)/2) / max_k A_jk`.
pub fn midprice_dual_set(inst: &Instance) -> Result<DualSet> {
    let mid = 0.5 * (inst.price_min + inst.price_max);
    DualSet::new((0..inst.m).map(|j| mid / inst.a.row(j).max()).collect())
}

impl PdNrmConfig {
    pub fn tuned(inst: &Instance) -> Result<Self> {
        Self::resolve(&PdNrmConfigFile::default(), inst)
    }

    pub fn resolve(file: &PdNrmConfigFile, inst: &Instance) -> Result<Self> {
        let frac = file.p_margin.unwrap_or(DEFAULT_P_MARGIN);
        if !(frac > 0.0 && frac < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "p_margin must be in (0, 0.5), got {frac}"
            )));
        }
        let width = inst.price_max - inst.price_min;
        let p_margin = frac * width;
        let rho_bar = (inst.n as f64).sqrt() * (width - 2.0 * p_margin);
        let numeric = [
            file.kappa1,
            file.kappa2,
            file.kappa3,
            file.kappa5,
            file.kappa6,
            file.eta1,
            file.eta2,
            file.mu,
        ];
        let dual_set = match (&file.lambda_max, file.mode) {
            (Some(l), _) => {
                check_dim(inst.m, l.len())?;
                DualSet::new(l.clone())?
            }
            (None, ConstantsMode::Theory) => DualSet::crude(inst)?,
            (None, _) => midprice_dual_set(inst)?,
        };
        let mut constants = match file.mode {
            ConstantsMode::Tuned | ConstantsMode::Theory => {
                if file.n0.is_some() || numeric.iter().any(Option::is_some) {
                    return Err(Error::InvalidConfig(
                        "numeric constants can only be given in explicit mode".into(),
                    ));
                }
                if file.mode == ConstantsMode::Tuned {
                    constants_tuned(inst.n, inst.horizon.max(2))
                } else {
                    let grid = file
                        .grid_points
                        .unwrap_or_else(|| inst.default_grid(20_000));
                    let reg = inst.regularity(grid)?;
                    constants_theory(
                        inst.n,
                        inst.horizon.max(2),
                        &reg,
                        dual_set.lambda_bar(),
                        p_margin,
                        rho_bar,
                    )?
                }
            }
            ConstantsMode::Explicit => {
                let need = |x: Option<f64>, name: &str| {
                    x.ok_or_else(|| Error::InvalidConfig(format!("explicit mode requires {name}")))
                };
                LearningConstants {
                    n0: file
                        .n0
                        .ok_or_else(|| Error::InvalidConfig("explicit mode requires n0".into()))?,
                    kappa1: need(file.kappa1, "kappa1")?,
                    kappa2: need(file.kappa2, "kappa2")?,
                    kappa3: need(file.kappa3, "kappa3")?,
                    kappa4: file.kappa4,
                    kappa5: need(file.kappa5, "kappa5")?,
                    kappa6: need(file.kappa6, "kappa6")?,
                    eta1: need(file.eta1, "eta1")?,
                    eta2: need(file.eta2, "eta2")?,
                    mu: need(file.mu, "mu")?,
                    contraction: TUNED_CONTRACTION,
                }
            }
        };
        if let Some(g) = file.contraction {
            constants.contraction = g;
        }
        let lambda0 = match &file.lambda0 {
            Some(l) => {
                check_dim(inst.m, l.len())?;
                let l = Vector::from_column_slice(l);
                if !dual_set.contains(&l) {
                    return Err(Error::InvalidConfig(format!(
                        "lambda0 {:?} lies outside the dual box",
                        l.as_slice()
                    )));
                }
                l
            }
            None => dual_set.center(),
        };
        let cfg = Self {
            mode: file.mode,
            constants,
            dual_set,
            p_margin,
            rho_bar,
            warm_start: file.warm_start.unwrap_or(true),
            lambda0,
            horizon: inst.horizon,
        };
        cfg.validate(inst.n)?;
        Ok(cfg)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let c = &self.constants;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if c.n0 < 4 * n as u64 {
            return bad(format!("n0 = {} is below 4N = {}", c.n0, 4 * n));
        }
        for (name, x) in [
            ("kappa1", c.kappa1),
            ("kappa2", c.kappa2),
            ("kappa3", c.kappa3),
            ("kappa5", c.kappa5),
            ("kappa6", c.kappa6),
            ("eta1", c.eta1),
            ("eta2", c.eta2),
            ("mu", c.mu),
        ] {
            if !(x > 0.0) || !x.is_finite() {
                return bad(format!("{name} must be positive and finite, got {x}"));
            }
        }
        if !(c.contraction > 0.0 && c.contraction < 1.0) {
            return bad(format!(
                "contraction must be in (0, 1), got {}",
                c.contraction
            ));
        }
        if self.mode != ConstantsMode::Explicit
            && (c.kappa2 * c.kappa2 - c.kappa5).abs() > 1e-9 * c.kappa5
        {
            return bad("kappa2 must equal sqrt(kappa5)".into());
        }
        Ok(())
    }

    /// Echo as a complete explicit-style JSON document.
    pub fn to_file(&self) -> PdNrmConfigFile {
        let c = &self.constants;
        PdNrmConfigFile {
            mode: self.mode,
            n0: Some(c.n0),
            kappa1: Some(c.kappa1),
            kappa2: Some(c.kappa2),
            kappa3: Some(c.kappa3),
            kappa4: c.kappa4,
            kappa5: Some(c.kappa5),
            kappa6: Some(c.kappa6),
            eta1: Some(c.eta1),
            eta2: Some(c.eta2),
            mu: Some(c.mu),
            lambda_max: Some(self.dual_set.lambda_max.clone()),
            contraction: Some(c.contraction),
            warm_start: Some(self.warm_start),
            lambda0: Some(self.lambda0.iter().cloned().collect()),
            p_margin: None,
            grid_points: None,
        }
    }

    /// `P = [p̲ + ρ̲, p̄ − ρ̲]ᴺ`.
    pub fn interior_box(&self, inst: &Instance) -> BoxBounds {
        BoxBounds::uniform(
            inst.n,
            inst.price_min + self.p_margin,
            inst.price_max - self.p_margin,
        )
    }

    /// `ε̄_s = (1 + μη₂)^{-s/2} κ₆`.
    pub fn eps_bar(&self, epoch: u64) -> f64 {
        let c = &self.constants;
        (1.0 + c.mu * c.eta2).powf(-(epoch as f64) / 2.0) * c.kappa6
    }

    /// `n_τ = ⌈g^{-2τ} n₀⌉`, saturating.
    pub fn loop_length(&self, tau: u64) -> u64 {
        let c = &self.constants;
        to_len(c.contraction.powf(-2.0 * tau as f64) * c.n0 as f64)
    }

    /// Upper bound on dual updates over the horizon: `2 ln T / (μη₂) + 1`.
    pub fn max_dual_updates(&self) -> f64 {
        2.0 * (self.horizon as f64).ln() / (self.constants.mu * self.constants.eta2) + 1.0
    }

    /// Upper bound on primal loops per epoch: `2 ln T / (1 − g) + 1`, where
    /// `1 − g` plays the role of `η₁ σ_D² σ_φ / 2`.
    pub fn max_loops_per_epoch(&self) -> f64 {
        2.0 * (self.horizon as f64).ln() / (1.0 - self.constants.contraction) + 1.0
    }
}

/// Probe prices and period counts for one gradient-estimation call.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSchedule {
    pub u: f64,
    /// Periods per one-sided probe, `⌊n/(4N)⌋`.
    pub m: u64,
    /// `p + ue₁, p − ue₁, …, p + ue_N, p − ue_N`.
    pub probes: Vec<Vector>,
    /// Periods left for the balanced price, `n − 2Nm`.
    pub tail: u64,
}

pub fn probe_schedule(p: &Vector, n: u64, bounds: &BoxBounds) -> ProbeSchedule {
    let dim = p.len();
    let room = (0..dim)
        .map(|i| (p[i] - bounds.lo[i]).min(bounds.hi[i] - p[i]))
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    let u = ((dim as f64).sqrt() / (n as f64).powf(0.25)).min(room);
    let m = n / (4 * dim as u64);
    let mut probes = Vec::with_capacity(2 * dim);
    for i in 0..dim {
        let mut plus = p.clone();
        plus[i] += u;
        let mut minus = p.clone();
        minus[i] -= u;
        probes.push(bounds.project(&plus));
        probes.push(bounds.project(&minus));
    }
    ProbeSchedule {
        u,
        m,
        probes,
        tail: n - 2 * dim as u64 * m,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub d_hat: Vector,
    pub j_hat: Matrix,
    pub gradf_hat: Vector,
}

/// Two-point estimators from average probe demands, ordered as in
/// [`ProbeSchedule::probes`].
pub fn estimate(schedule: &ProbeSchedule, averages: &[Vector]) -> Estimates {
    let dim = schedule.probes.len() / 2;
    let u = schedule.u;
    let mut d_hat = Vector::zeros(dim);
    let mut j_hat = Matrix::zeros(dim, dim);
    let mut gradf_hat = Vector::zeros(dim);
    for i in 0..dim {
        let (dp, dm) = (&averages[2 * i], &averages[2 * i + 1]);
        let (pp, pm) = (&schedule.probes[2 * i], &schedule.probes[2 * i + 1]);
        d_hat += dp + dm;
        j_hat.set_column(i, &((dp - dm) / (2.0 * u)));
        gradf_hat[i] = (pp.dot(dp) - pm.dot(dm)) / (2.0 * u);
    }
    d_hat /= 2.0 * dim as f64;
    Estimates {
        d_hat,
        j_hat,
        gradf_hat,
    }
}

/// Inputs to the balancing program.
#[derive(Debug, Clone, Copy)]
pub struct BalanceParams {
    pub n: u64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
}

pub const BALANCE_SWEEPS: usize = 500;
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutcome {
    pub tilde_p: Vector,
    pub feasible: bool,
    pub sweeps: usize,
}

/// The balancing constraints as a polyhedron in `p̃`.
pub fn balance_region(
    est: &Estimates,
    p: &Vector,
    lambda: &Vector,
    a: &Matrix,
    gamma: &Vector,
    params: BalanceParams,
    bounds: &BoxBounds,
) -> Polyhedron {
    let sqrt_n = (params.n as f64).sqrt();
    let radius = params.kappa1 * (params.n as f64).powf(-0.25);
    let local = BoxBounds::new(p.add_scalar(-radius), p.add_scalar(radius)).intersect(bounds);
    let mut hs = Vec::with_capacity(2 * a.nrows());
    for j in 0..a.nrows() {
        let aj: Vector = a.row(j).transpose();
        let c: Vector = est.j_hat.transpose() * &aj * 0.5;
        let base = aj.dot(&est.d_hat) - c.dot(p);
        hs.push(Halfspace::new(
            c.clone(),
            gamma[j] + params.kappa3 / sqrt_n - base,
        ));
        if lambda[j] > 0.0 {
            let lower =
                gamma[j] - params.kappa2 / (lambda[j].min(1.0) * sqrt_n) - params.kappa3 / sqrt_n;
            hs.push(Halfspace::new(-c, base - lower));
        }
    }
    Polyhedron::new(Some(local), hs)
}

/// Find `p̃` near `p` satisfying the balancing constraints by cyclic
/// projections; fall back to `p` when none is found.
pub fn demand_balance(
    est: &Estimates,
    p: &Vector,
    lambda: &Vector,
    a: &Matrix,
    gamma: &Vector,
    params: BalanceParams,
    bounds: &BoxBounds,
) -> BalanceOutcome {
    let region = balance_region(est, p, lambda, a, gamma, params, bounds);
    let out = region.find_feasible(p, BALANCE_SWEEPS, BALANCE_TOL);
    if out.feasible {
        BalanceOutcome {
            tilde_p: out.point,
            feasible: true,
            sweeps: out.sweeps,
        }
    } else {
        BalanceOutcome {
            tilde_p: p.clone(),
            feasible: false,
            sweeps: out.sweeps,
        }
    }
}

/// `∇̂_p L = ∇̂f − Ĵᵀ Aᵀ λ`.
pub fn lagrangian_gradient_estimate(est: &Estimates, a: &Matrix, lambda: &Vector) -> Vector {
    &est.gradf_hat - est.j_hat.transpose() * (a.transpose() * lambda)
}

/// Closed-form minimizer of `⟨ĝ, λ⟩ + (μ/2)‖λ‖² + (1/2η₂)‖λ − λ_s‖²` over the box `Λ`.
pub fn prox_dual_step(
    lambda: &Vector,
    g_h: &Vector,
    mu: f64,
    eta2: f64,
    dual_set: &DualSet,
) -> Vector {
    dual_set.project(&((lambda - g_h * eta2) / (1.0 + mu * eta2)))
}

#[derive(Debug, Clone)]
pub struct GradEstOutput {
    pub estimates: Estimates,
    pub tilde_p: Vector,
    pub balancing: BalancingStatus,
    pub periods_consumed: u64,
    pub u: f64,
    pub m: u64,
}

impl GradEstOutput {
    pub fn balancing_feasible(&self) -> bool {
        self.balancing == BalancingStatus::Feasible
    }
}

/// Run gradient estimation and balancing against a block-level environment.
/// Stops early if the environment runs out of periods.
#[allow(clippy::too_many_arguments)]
pub fn grad_est<E: Environment + ?Sized>(
    env: &mut E,
    p: &Vector,
    lambda: &Vector,
    n: u64,
    params: BalanceParams,
    a: &Matrix,
    gamma: &Vector,
    bounds: &BoxBounds,
) -> Result<GradEstOutput> {
    let sched = probe_schedule(p, n, bounds);
    if sched.m > 0 && sched.u <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "zero perturbation radius at {p:?}"
        )));
    }
    let dim = p.len();
    let mut consumed = 0;
    if sched.m == 0 {
        consumed += env.commit(p, n)?.periods;
        return Ok(GradEstOutput {
            estimates: Estimates {
                d_hat: Vector::from_element(dim, f64::NAN),
                j_hat: Matrix::from_element(dim, dim, f64::NAN),
                gradf_hat: Vector::from_element(dim, f64::NAN),
            },
            tilde_p: p.clone(),
            balancing: BalancingStatus::Skipped,
            periods_consumed: consumed,
            u: sched.u,
            m: 0,
        });
    }
    let mut avgs = Vec::with_capacity(2 * dim);
    for probe in &sched.probes {
        let out = env.commit(probe, sched.m)?;
        consumed += out.periods;
        avgs.push(if out.periods > 0 {
            out.demand_sum / out.periods as f64
        } else {
            Vector::from_element(dim, f64::NAN)
        });
    }
    let est = estimate(&sched, &avgs);
    let bal = demand_balance(
        &est,
        p,
        lambda,
        a,
        gamma,
        BalanceParams { n, ..params },
        bounds,
    );
    consumed += env.commit(&bal.tilde_p, sched.tail)?.periods;
    Ok(GradEstOutput {
        estimates: est,
        tilde_p: bal.tilde_p,
        balancing: if bal.feasible {
            BalancingStatus::Feasible
        } else {
            BalancingStatus::Infeasible
        },
        periods_consumed: consumed,
        u: sched.u,
        m: sched.m,
    })
}

#[derive(Debug, Clone)]
pub struct PrimalOptOutput {
    pub p_hat: Vector,
    pub d_hat: Vector,
    pub loops: u64,
    pub iterates: Vec<Vector>,
    /// The ascent step taken from `p_hat`, used to warm start the next call.
    pub next_start: Vector,
}

/// Inexact projected gradient ascent on `L(λ, ·)` with loop lengths `n_τ`,
/// run until the first loop with `n_τ > κ₅/ε̄²` has finished or the
/// environment is exhausted. Returns the last estimation price and its `D̂`.
pub fn primal_opt<E: Environment + ?Sized>(
    env: &mut E,
    inst: &Instance,
    cfg: &PdNrmConfig,
    lambda: &Vector,
    eps_bar: f64,
    start: &Vector,
) -> Result<PrimalOptOutput> {
    let c = &cfg.constants;
    let interior = cfg.interior_box(inst);
    let bounds = inst.price_box();
    let params = BalanceParams {
        n: 0,
        kappa1: c.kappa1,
        kappa2: c.kappa2,
        kappa3: c.kappa3,
    };
    let mut p = interior.project(start);
    let mut iterates = vec![p.clone()];
    let mut tau = 0;
    loop {
        let n_tau = cfg.loop_length(tau);
        let out = grad_est(
            env,
            &p,
            lambda,
            n_tau,
            params,
            &inst.a,
            &inst.gamma,
            &bounds,
        )?;
        let done = n_tau as f64 > c.kappa5 / (eps_bar * eps_bar) || env.remaining() == 0;
        if out.balancing == BalancingStatus::Skipped {
            return Ok(PrimalOptOutput {
                next_start: p.clone(),
                p_hat: p,
                d_hat: out.estimates.d_hat,
                loops: tau + 1,
                iterates,
            });
        }
        let g = lagrangian_gradient_estimate(&out.estimates, &inst.a, lambda);
        let next = interior.project(&(&p + g * c.eta1));
        if done {
            return Ok(PrimalOptOutput {
                p_hat: p,
                d_hat: out.estimates.d_hat,
                loops: tau + 1,
                iterates,
                next_start: next,
            });
        }
        p = next;
        iterates.push(p.clone());
        tau += 1;
    }
}

/// A block of consecutive periods at one price.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub price: Vector,
    pub len: u64,
}

#[derive(Debug, Clone)]
enum Phase {
    Probe(usize),
    Commit {
        tilde: Vector,
        status: BalancingStatus,
    },
}

/// Period-free state machine for the full algorithm. Callers alternate
/// `next_block` and `complete_block`.
#[derive(Debug, Clone)]
pub struct PdNrm {
    a: Matrix,
    gamma: Vector,
    bounds: BoxBounds,
    interior: BoxBounds,
    cfg: PdNrmConfig,
    epoch: u64,
    lambda: Vector,
    eps_bar: f64,
    tau: u64,
    p: Vector,
    n_tau: u64,
    schedule: ProbeSchedule,
    averages: Vec<Vector>,
    estimates: Option<Estimates>,
    phase: Phase,
    events: Vec<AlgorithmEvent>,
}

impl PdNrm {
    pub fn new(inst: &Instance, cfg: PdNrmConfig) -> Result<Self> {
        cfg.validate(inst.n)?;
        check_dim(inst.m, cfg.dual_set.lambda_max.len())?;
        let interior = cfg.interior_box(inst);
        let p = interior.center();
        let lambda = cfg.lambda0.clone();
        let mut s = Self {
            a: inst.a.clone(),
            gamma: inst.gamma.clone(),
            bounds: inst.price_box(),
            interior,
            eps_bar: cfg.eps_bar(0),
            cfg,
            epoch: 0,
            lambda,
            tau: 0,
            p,
            n_tau: 0,
            schedule: ProbeSchedule {
                u: 0.0,
                m: 0,
                probes: Vec::new(),
                tail: 0,
            },
            averages: Vec::new(),
            estimates: None,
            phase: Phase::Probe(0),
            events: Vec::new(),
        };
        s.start_loop();
        Ok(s)
    }

    pub fn lambda(&self) -> &Vector {
        &self.lambda
    }

    pub fn price(&self) -> &Vector {
        &self.p
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn config(&self) -> &PdNrmConfig {
        &self.cfg
    }

    pub fn take_events(&mut self) -> Vec<AlgorithmEvent> {
        std::mem::take(&mut self.events)
    }

    fn start_loop(&mut self) {
        self.n_tau = self.cfg.loop_length(self.tau);
        self.schedule = probe_schedule(&self.p, self.n_tau, &self.bounds);
        self.averages.clear();
        self.estimates = None;
        self.phase = if self.schedule.m == 0 || self.schedule.u <= 0.0 {
            self.schedule.m = 0;
            self.schedule.tail = self.n_tau;
            Phase::Commit {
                tilde: self.p.clone(),
                status: BalancingStatus::Skipped,
            }
        } else {
            Phase::Probe(0)
        };
    }

    pub fn next_block(&self) -> Block {
        match &self.phase {
            Phase::Probe(k) => Block {
                price: self.schedule.probes[*k].clone(),
                len: self.schedule.m,
            },
            Phase::Commit { tilde, .. } => Block {
                price: tilde.clone(),
                len: self.schedule.tail,
            },
        }
    }

    /// Report the summed demand over a finished block.
    pub fn complete_block(&mut self, periods: u64, demand_sum: &Vector) {
        match self.phase.clone() {
            Phase::Probe(k) => {
                self.averages.push(demand_sum / periods.max(1) as f64);
                if k + 1 < self.schedule.probes.len() {
                    self.phase = Phase::Probe(k + 1);
                    return;
                }
                let est = estimate(&self.schedule, &self.averages);
                let c = &self.cfg.constants;
                let params = BalanceParams {
                    n: self.n_tau,
                    kappa1: c.kappa1,
                    kappa2: c.kappa2,
                    kappa3: c.kappa3,
                };
                let bal = demand_balance(
                    &est,
                    &self.p,
                    &self.lambda,
                    &self.a,
                    &self.gamma,
                    params,
                    &self.bounds,
                );
                self.estimates = Some(est);
                self.phase = Phase::Commit {
                    tilde: bal.tilde_p,
                    status: if bal.feasible {
                        BalancingStatus::Feasible
                    } else {
                        BalancingStatus::Infeasible
                    },
                };
                if self.schedule.tail == 0 {
                    self.finish_loop();
                }
            }
            Phase::Commit { .. } => self.finish_loop(),
        }
    }

    fn finish_loop(&mut self) {
        let Phase::Commit { tilde, status } = self.phase.clone() else {
            unreachable!("loop finishes in the commit phase")
        };
        let c = self.cfg.constants.clone();
        let (next_p, step, clipped) = match &self.estimates {
            Some(est) => {
                let g = lagrangian_gradient_estimate(est, &self.a, &self.lambda);
                let raw = &self.p + &g * c.eta1;
                let next = self.interior.project(&raw);
                let clipped = next != raw;
                (next, g.norm() * c.eta1, clipped)
            }
            None => (self.p.clone(), 0.0, false),
        };
        self.events.push(AlgorithmEvent::Loop {
            epoch: self.epoch,
            loop_index: self.tau,
            lambda: self.lambda.iter().cloned().collect(),
            price: self.p.iter().cloned().collect(),
            tilde_price: tilde.iter().cloned().collect(),
            loop_length: self.n_tau,
            periods: self.schedule.probes.len() as u64 * self.schedule.m + self.schedule.tail,
            step,
            balancing: status,
            clipped,
            truncated: false,
        });
        if self.n_tau as f64 > c.kappa5 / (self.eps_bar * self.eps_bar) {
            self.finish_epoch();
            self.p = if self.cfg.warm_start {
                next_p
            } else {
                self.interior.center()
            };
        } else {
            self.p = next_p;
            self.tau += 1;
        }
        self.start_loop();
    }

    fn finish_epoch(&mut self) {
        let c = self.cfg.constants.clone();
        let loops = self.tau + 1;
        let (next_lambda, grad_q) = match &self.estimates {
            Some(est) => {
                let grad_q = &self.gamma - &self.a * &est.d_hat;
                let g_h = &grad_q - &self.lambda * c.mu;
                (
                    prox_dual_step(&self.lambda, &g_h, c.mu, c.eta2, &self.cfg.dual_set),
                    grad_q,
                )
            }
            None => (self.lambda.clone(), Vector::zeros(self.gamma.len())),
        };
        self.events.push(AlgorithmEvent::DualUpdate {
            epoch: self.epoch,
            lambda: self.lambda.iter().cloned().collect(),
            next_lambda: next_lambda.iter().cloned().collect(),
            eps_bar: self.eps_bar,
            loops,
            grad_q: grad_q.iter().cloned().collect(),
        });
        self.lambda = next_lambda;
        self.epoch += 1;
        self.eps_bar = self.cfg.eps_bar(self.epoch);
        self.tau = 0;
    }
}

/// Drive the state machine against a block-level environment until it is
/// exhausted.
pub fn run_on_environment<E: Environment + ?Sized>(machine: &mut PdNrm, env: &mut E) -> Result<()> {
    while env.remaining() > 0 {
        let block = machine.next_block();
        let out = env.commit(&block.price, block.len)?;
        if out.periods < block.len {
            break;
        }
        machine.complete_block(out.periods, &out.demand_sum);
    }
    Ok(())
}

/// Period-level adapter used by the simulator.
pub struct PdNrmPolicy {
    machine: PdNrm,
    block: Block,
    seen: u64,
    sum: Vector,
}

impl PdNrmPolicy {
    pub fn new(inst: &Instance, cfg: PdNrmConfig) -> Result<Self> {
        let machine = PdNrm::new(inst, cfg)?;
        let block = machine.next_block();
        Ok(Self {
            machine,
            block,
            seen: 0,
            sum: Vector::zeros(inst.n),
        })
    }

    pub fn machine(&self) -> &PdNrm {
        &self.machine
    }
}

impl Policy for PdNrmPolicy {
    fn name(&self) -> &str {
        "pdnrm"
    }

    fn next_price(&mut self, _period: u64) -> PriceAction {
        if self.seen >= self.block.len {
            self.block = self.machine.next_block();
            self.seen = 0;
            self.sum.fill(0.0);
        }
        PriceAction::Post(self.block.price.clone())
    }

    fn commitment(&self) -> u64 {
        self.block.len - self.seen
    }

    fn observe(&mut self, _period: u64, realized: &Vector) {
        self.sum += realized;
        self.seen += 1;
        if self.seen == self.block.len {
            self.machine.complete_block(self.seen, &self.sum);
        }
    }

    fn take_events(&mut self) -> Vec<AlgorithmEvent> {
        self.machine.take_events()
    }
}
