//! Invariant suite behind `nrm check`.

use serde::Serialize;

use crate::baselines::EtcConfigFile;
use crate::bench::{make_policy, EventStats, PolicyKind, FLUID_TOL};
use crate::error::Result;
use crate::fluid::{dual_q, grad_q, solve_fluid, Instance};
use crate::linalg::fd_gradient;
use crate::pdnrm::{PdNrmConfig, PdNrmConfigFile};
use crate::sim::{run_episode, AlgorithmEvent, EpisodeOptions};

/// Horizon cap for the episode checks.
pub const CHECK_HORIZON: u64 = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CheckReport {
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{tag} {:<28} {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

/// `λ` entries of PD-NRM events that leave `Λ`, and prices outside `P`.
fn event_violations(events: &[AlgorithmEvent], cfg: &PdNrmConfig, inst: &Instance) -> Vec<String> {
    let pbox = cfg.interior_box(inst);
    let in_lambda = |l: &[f64]| {
        cfg.dual_set
            .contains(&crate::linalg::Vector::from_column_slice(l))
    };
    let in_p = |p: &[f64]| {
        p.iter()
            .enumerate()
            .all(|(i, &x)| x >= pbox.lo[i] - 1e-12 && x <= pbox.hi[i] + 1e-12)
    };
    let mut out = Vec::new();
    for e in events {
        match e {
            AlgorithmEvent::Loop {
                epoch,
                loop_index,
                lambda,
                price,
                ..
            } => {
                if !in_lambda(lambda) {
                    out.push(format!("epoch {epoch} loop {loop_index}: λ outside Λ"));
                }
                if !in_p(price) {
                    out.push(format!("epoch {epoch} loop {loop_index}: price outside P"));
                }
            }
            AlgorithmEvent::DualUpdate {
                epoch, next_lambda, ..
            } => {
                if !in_lambda(next_lambda) {
                    out.push(format!("epoch {epoch}: updated λ outside Λ"));
                }
            }
        }
    }
    out
}

pub fn run_checks(inst: &Instance, pdnrm: &PdNrmConfigFile, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    inst.validate()?;

    let fluid = solve_fluid(inst, FLUID_TOL)?;
    report.push(
        "fluid feasibility",
        fluid.feasibility_residual <= 1e-6,
        format!("max (Ad*-γ)+ = {:.3e}", fluid.feasibility_residual),
    );
    report.push(
        "fluid duality gap",
        fluid.duality_gap.abs() <= 1e-5,
        format!("|Q(λ*)-φ(d*)| = {:.3e}", fluid.duality_gap.abs()),
    );
    report.push(
        "complementary slackness",
        fluid.slackness_residual <= 1e-5,
        format!("residual = {:.3e}", fluid.slackness_residual),
    );

    let reg = inst.regularity(inst.default_grid(20_000));
    match reg.and_then(|r| r.validate()) {
        Ok(()) => report.push("regularity constants", true, "finite and positive"),
        Err(e) => report.push("regularity constants", false, e.to_string()),
    }

    let cfg = PdNrmConfig::resolve(pdnrm, inst)?;
    let mut worst = 0.0f64;
    for k in 1..=3 {
        let lam = cfg.dual_set.center() * (k as f64 / 2.0);
        let lam = cfg.dual_set.project(&lam);
        let g = grad_q(inst, &lam, FLUID_TOL)?;
        let fd = fd_gradient(
            |l| dual_q(inst, l, FLUID_TOL).unwrap_or(f64::NAN),
            &lam,
            1e-5,
        );
        worst = worst.max((&g - &fd).norm() / g.norm().max(1e-12));
    }
    report.push(
        "dual gradient identity",
        worst <= 1e-4,
        format!("max relative FD error = {worst:.3e}"),
    );

    let short = inst.with_horizon(inst.horizon.min(CHECK_HORIZON));
    let short_cfg = PdNrmConfig::resolve(pdnrm, &short)?;
    for kind in [PolicyKind::Pdnrm, PolicyKind::Clairvoyant, PolicyKind::Etc] {
        let name = kind.as_str();
        let run = || -> Result<_> {
            let mut p = make_policy(kind, &short, &fluid, pdnrm, &EtcConfigFile::default())?;
            run_episode(&short, p.as_mut(), seed, &EpisodeOptions::default())
        };
        let (a, b) = (run()?, run()?);
        let detail = if a.violations.is_empty() {
            format!("T = {}, revenue {:.4}", short.horizon, a.total_revenue)
        } else {
            a.violations.join("; ")
        };
        report.push(format!("{name} trace invariants"), a.is_clean(), detail);
        report.push(
            format!("{name} rerun identical"),
            a.digest == b.digest && a.total_revenue.to_bits() == b.total_revenue.to_bits(),
            format!("digest {:016x}", a.digest),
        );
        if kind == PolicyKind::Pdnrm {
            let bad = event_violations(&a.events, &short_cfg, &short);
            report.push(
                "pdnrm iterates in Λ × P",
                bad.is_empty(),
                if bad.is_empty() {
                    format!("{} events", a.events.len())
                } else {
                    bad.join("; ")
                },
            );
            let s = EventStats::from_events(&a.events);
            let (du, lp) = (
                short_cfg.max_dual_updates(),
                short_cfg.max_loops_per_epoch(),
            );
            report.push(
                "pdnrm epoch bounds",
                s.dual_updates as f64 <= du && s.max_loops_per_epoch as f64 <= lp,
                format!(
                    "{} dual updates (≤ {du:.1}), {} loops per epoch (≤ {lp:.1})",
                    s.dual_updates, s.max_loops_per_epoch
                ),
            );
        }
    }
    Ok(report)
}
