//! Replication harness: runs every (policy, horizon, replicate) episode of a
//! plan in parallel, aggregates deterministically and writes CSV / JSON.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{clairvoyant_policy, EtcConfig, EtcConfigFile, EtcPolicy};
use crate::error::{Error, Result};
use crate::fluid::{solve_fluid, FluidReport, FluidSolution, Instance, InstanceFile};
use crate::linalg::stable_sum;
use crate::pdnrm::{PdNrmConfig, PdNrmConfigFile, PdNrmPolicy};
use crate::sim::{mix_seed, percentage_loss, run_episode, AlgorithmEvent, EpisodeOptions, Policy};

pub const FLUID_TOL: f64 = 1e-10;

pub const SUMMARY_HEADER: [&str; 7] = [
    "policy",
    "T",
    "mean_loss",
    "stderr",
    "mean_revenue",
    "mean_shutoff",
    "wall_ms",
];
pub const EPISODES_HEADER: [&str; 7] = [
    "policy",
    "T",
    "replicate",
    "seed",
    "revenue",
    "loss",
    "shutoff",
];

pub const DENOMINATOR_NOTE: &str =
    "percentage loss = (T·φ(d*) − revenue) / (T·φ(d*)) with the fluid upper bound as \
     denominator, which is at least the optimal policy's expected revenue";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Pdnrm,
    Clairvoyant,
    Etc,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pdnrm => "pdnrm",
            Self::Clairvoyant => "clairvoyant",
            Self::Etc => "etc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pdnrm" => Ok(Self::Pdnrm),
            "clairvoyant" => Ok(Self::Clairvoyant),
            "etc" => Ok(Self::Etc),
            other => Err(Error::InvalidConfig(format!(
                "unknown policy {other:?}; expected pdnrm, clairvoyant or etc"
            ))),
        }
    }
}

/// A path (relative to the plan file) or an inline instance document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstanceRef {
    Path(PathBuf),
    Inline(Box<InstanceFile>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchPlanFile {
    pub instance: InstanceRef,
    pub policies: Vec<PolicyKind>,
    #[serde(default)]
    pub pdnrm_config: PdNrmConfigFile,
    #[serde(default)]
    pub etc_config: EtcConfigFile,
    #[serde(rename = "T_grid")]
    pub t_grid: Vec<u64>,
    pub replications: u64,
    pub base_seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Record wall-clock times; off keeps outputs byte-identical across runs.
    #[serde(default)]
    pub timing: bool,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub instance: Instance,
    pub file: BenchPlanFile,
}

impl BenchPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: BenchPlanFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(file, path.parent())
    }

    pub fn from_file(mut file: BenchPlanFile, base: Option<&Path>) -> Result<Self> {
        let instance = match &file.instance {
            InstanceRef::Path(p) => {
                let full = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                Instance::load(full)?
            }
            InstanceRef::Inline(spec) => Instance::from_file_spec(spec)?,
        };
        if let (Some(b), Some(out)) = (base, &file.output_dir) {
            if out.is_relative() {
                file.output_dir = Some(b.join(out));
            }
        }
        let plan = Self { instance, file };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.file;
        if f.replications < 1 {
            return Err(Error::InvalidConfig(
                "replications must be at least 1".into(),
            ));
        }
        if f.policies.is_empty() {
            return Err(Error::InvalidConfig("no policies given".into()));
        }
        if f.t_grid.is_empty() || f.t_grid.windows(2).any(|w| w[0] >= w[1]) || f.t_grid[0] < 1 {
            return Err(Error::InvalidConfig(
                "T_grid must be non-empty, positive and strictly increasing".into(),
            ));
        }
        for &t in &f.t_grid {
            let inst = self.instance.with_horizon(t);
            if f.policies.contains(&PolicyKind::Pdnrm) {
                PdNrmConfig::resolve(&f.pdnrm_config, &inst)?;
            }
            if f.policies.contains(&PolicyKind::Etc) {
                EtcConfig::resolve(&f.etc_config, &inst)?;
            }
        }
        Ok(())
    }

    /// Seed shared by every policy for replicate `r` at horizon `t`.
    pub fn seed(&self, t: u64, r: u64) -> u64 {
        mix_seed(mix_seed(self.file.base_seed, t), r)
    }
}

/// Summary statistics read from a learning policy's event log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EventStats {
    pub dual_updates: u64,
    pub max_loops_per_epoch: u64,
    pub loops: u64,
}

impl EventStats {
    pub fn from_events(events: &[AlgorithmEvent]) -> Self {
        let mut s = Self::default();
        let mut current = 0u64;
        let mut epoch = None;
        for e in events {
            match e {
                AlgorithmEvent::Loop { epoch: k, .. } => {
                    if epoch != Some(*k) {
                        epoch = Some(*k);
                        current = 0;
                    }
                    current += 1;
                    s.loops += 1;
                    s.max_loops_per_epoch = s.max_loops_per_epoch.max(current);
                }
                AlgorithmEvent::DualUpdate { .. } => s.dual_updates += 1,
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub policy: PolicyKind,
    pub horizon: u64,
    pub replicate: u64,
    pub seed: u64,
    pub revenue: f64,
    pub loss: f64,
    pub shutoff: Option<u64>,
    pub wall_ms: f64,
    pub clean: bool,
    pub violations: Vec<String>,
    pub digest: u64,
    pub stats: Option<EventStats>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: PolicyKind,
    pub horizon: u64,
    pub episodes: u64,
    pub mean_loss: f64,
    pub stderr: f64,
    pub mean_revenue: f64,
    /// Horizon + 1 stands in for episodes without a shutoff.
    pub mean_shutoff: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub rows: Vec<SummaryRow>,
    pub episodes: Vec<EpisodeResult>,
    pub slopes: Vec<(PolicyKind, Option<f64>)>,
    pub fluid: FluidReport,
}

impl BenchSummary {
    pub fn row(&self, policy: PolicyKind, horizon: u64) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.horizon == horizon)
    }
}

pub fn make_policy(
    kind: PolicyKind,
    inst: &Instance,
    fluid: &FluidSolution,
    pdnrm: &PdNrmConfigFile,
    etc: &EtcConfigFile,
) -> Result<Box<dyn Policy>> {
    Ok(match kind {
        PolicyKind::Pdnrm => Box::new(PdNrmPolicy::new(inst, PdNrmConfig::resolve(pdnrm, inst)?)?),
        PolicyKind::Clairvoyant => Box::new(clairvoyant_policy(fluid)),
        PolicyKind::Etc => Box::new(EtcPolicy::new(inst, &EtcConfig::resolve(etc, inst)?)?),
    })
}

fn run_one(
    plan: &BenchPlan,
    fluid: &FluidSolution,
    kind: PolicyKind,
    t: u64,
    r: u64,
) -> EpisodeResult {
    let inst = plan.instance.with_horizon(t);
    let seed = plan.seed(t, r);
    let start = Instant::now();
    let outcome = make_policy(
        kind,
        &inst,
        fluid,
        &plan.file.pdnrm_config,
        &plan.file.etc_config,
    )
    .and_then(|mut p| run_episode(&inst, p.as_mut(), seed, &EpisodeOptions::default()));
    let wall_ms = if plan.file.timing {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    match outcome {
        Ok(trace) => EpisodeResult {
            policy: kind,
            horizon: t,
            replicate: r,
            seed,
            revenue: trace.total_revenue,
            loss: percentage_loss(&inst, fluid, trace.total_revenue),
            shutoff: trace.shutoff_period,
            wall_ms,
            clean: trace.is_clean(),
            stats: (kind == PolicyKind::Pdnrm).then(|| EventStats::from_events(&trace.events)),
            violations: trace.violations,
            digest: trace.digest,
            error: None,
        },
        Err(e) => EpisodeResult {
            policy: kind,
            horizon: t,
            replicate: r,
            seed,
            revenue: f64::NAN,
            loss: f64::NAN,
            shutoff: None,
            wall_ms,
            clean: false,
            violations: Vec::new(),
            digest: 0,
            stats: None,
            error: Some(e.to_string()),
        },
    }
}

fn mean(xs: &[f64]) -> f64 {
    stable_sum(xs) / xs.len() as f64
}

/// Aggregate one (policy, horizon) cell; episodes must be sorted by replicate.
pub fn summarize(policy: PolicyKind, horizon: u64, episodes: &[&EpisodeResult]) -> SummaryRow {
    let ok: Vec<&&EpisodeResult> = episodes.iter().filter(|e| e.error.is_none()).collect();
    let losses: Vec<f64> = ok.iter().map(|e| e.loss).collect();
    let n = losses.len();
    let mean_loss = if n > 0 { mean(&losses) } else { f64::NAN };
    let stderr = if n > 1 {
        let dev: Vec<f64> = losses.iter().map(|x| (x - mean_loss).powi(2)).collect();
        (stable_sum(&dev) / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    let revenue: Vec<f64> = ok.iter().map(|e| e.revenue).collect();
    let shutoff: Vec<f64> = ok
        .iter()
        .map(|e| e.shutoff.map_or(horizon as f64 + 1.0, |s| s as f64))
        .collect();
    let wall: Vec<f64> = episodes.iter().map(|e| e.wall_ms).collect();
    SummaryRow {
        policy,
        horizon,
        episodes: n as u64,
        mean_loss,
        stderr,
        mean_revenue: if n > 0 { mean(&revenue) } else { f64::NAN },
        mean_shutoff: if n > 0 { mean(&shutoff) } else { f64::NAN },
        wall_ms: stable_sum(&wall),
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope_points(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::DegenerateGrid(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::DegenerateGrid(
            "log-log fit needs positive coordinates".into(),
        ));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: Vec<f64> = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (x - mx) * (y - my))
        .collect();
    let sxx: Vec<f64> = lx.iter().map(|x| (x - mx).powi(2)).collect();
    let den = stable_sum(&sxx);
    if den <= 0.0 {
        return Err(Error::DegenerateGrid("all horizons are equal".into()));
    }
    Ok(stable_sum(&sxy) / den)
}

/// Slope of mean absolute regret `|mean_loss| · T · φ*` against `T`.
pub fn loglog_slope(summary: &BenchSummary, policy: PolicyKind) -> Result<f64> {
    let points: Vec<(f64, f64)> = summary
        .rows
        .iter()
        .filter(|r| r.policy == policy)
        .map(|r| {
            let t = r.horizon as f64;
            (t, (r.mean_loss * t * summary.fluid.value).abs())
        })
        .collect();
    loglog_slope_points(&points)
}

pub fn run_bench(plan: &BenchPlan) -> Result<BenchSummary> {
    let fluid = solve_fluid(&plan.instance, FLUID_TOL)?;
    let f = &plan.file;
    let mut jobs = Vec::new();
    for &kind in &f.policies {
        for &t in &f.t_grid {
            for r in 0..f.replications {
                jobs.push((kind, t, r));
            }
        }
    }
    let run = || -> Vec<EpisodeResult> {
        jobs.par_iter()
            .map(|&(kind, t, r)| run_one(plan, &fluid, kind, t, r))
            .collect()
    };
    let mut episodes = match f.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    episodes.sort_by(|a, b| {
        (a.policy, a.horizon, a.replicate).cmp(&(b.policy, b.horizon, b.replicate))
    });
    let mut rows = Vec::new();
    for &kind in &f.policies {
        for &t in &f.t_grid {
            let cell: Vec<&EpisodeResult> = episodes
                .iter()
                .filter(|e| e.policy == kind && e.horizon == t)
                .collect();
            rows.push(summarize(kind, t, &cell));
        }
    }
    let mut summary = BenchSummary {
        rows,
        episodes,
        slopes: Vec::new(),
        fluid: fluid.report(),
    };
    summary.slopes = f
        .policies
        .iter()
        .map(|&k| (k, loglog_slope(&summary, k).ok()))
        .collect();
    Ok(summary)
}

fn shutoff_field(s: Option<u64>) -> String {
    s.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

pub fn write_summary_csv<W: std::io::Write>(summary: &BenchSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in &summary.rows {
        w.write_record([
            r.policy.as_str().to_string(),
            r.horizon.to_string(),
            r.mean_loss.to_string(),
            r.stderr.to_string(),
            r.mean_revenue.to_string(),
            r.mean_shutoff.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_episodes_csv<W: std::io::Write>(summary: &BenchSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EPISODES_HEADER)?;
    for e in summary.episodes.iter().filter(|e| e.error.is_none()) {
        w.write_record([
            e.policy.as_str().to_string(),
            e.horizon.to_string(),
            e.replicate.to_string(),
            e.seed.to_string(),
            e.revenue.to_string(),
            e.loss.to_string(),
            shutoff_field(e.shutoff),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata<'a> {
    pub git_hash: String,
    pub plan: &'a BenchPlanFile,
    pub instance: InstanceFile,
    pub fluid: &'a FluidReport,
    pub loss_denominator: &'static str,
    pub slopes: Vec<(PolicyKind, Option<f64>)>,
    pub errors: Vec<String>,
    pub wall_seconds: f64,
}

pub fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Write `summary.csv`, `episodes.csv` and `metadata.json` into `dir`.
pub fn write_outputs(
    plan: &BenchPlan,
    summary: &BenchSummary,
    dir: &Path,
    wall_seconds: f64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_summary_csv(summary, std::fs::File::create(dir.join("summary.csv"))?)?;
    write_episodes_csv(summary, std::fs::File::create(dir.join("episodes.csv"))?)?;
    let meta = RunMetadata {
        git_hash: git_hash(),
        plan: &plan.file,
        instance: plan.instance.to_file_spec(),
        fluid: &summary.fluid,
        loss_denominator: DENOMINATOR_NOTE,
        slopes: summary.slopes.clone(),
        errors: summary
            .episodes
            .iter()
            .filter_map(|e| {
                e.error.as_ref().map(|m| {
                    format!(
                        "{} T={} r={}: {m}",
                        e.policy.as_str(),
                        e.horizon,
                        e.replicate
                    )
                })
            })
            .collect(),
        wall_seconds,
    };
    std::fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(
        policies: Vec<PolicyKind>,
        t_grid: Vec<u64>,
        reps: u64,
        threads: Option<usize>,
    ) -> BenchPlan {
        let file = BenchPlanFile {
            instance: InstanceRef::Inline(Box::new(
                Instance::two_product_example(1).to_file_spec(),
            )),
            policies,
            pdnrm_config: PdNrmConfigFile::default(),
            etc_config: EtcConfigFile::default(),
            t_grid,
            replications: reps,
            base_seed: 17,
            output_dir: None,
            timing: false,
            threads,
        };
        BenchPlan::from_file(file, None).unwrap()
    }

    #[test]
    fn slope_of_exact_power_laws() {
        let sqrt: Vec<(f64, f64)> = [1e3f64, 1e4, 1e5, 1e6]
            .iter()
            .map(|t| (*t, 3.0 * t.sqrt()))
            .collect();
        assert!((loglog_slope_points(&sqrt).unwrap() - 0.5).abs() < 1e-12);
        let lin: Vec<(f64, f64)> = [1e3f64, 1e4, 1e5].iter().map(|t| (*t, 0.2 * t)).collect();
        assert!((loglog_slope_points(&lin).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            loglog_slope_points(&lin[..2]),
            Err(Error::DegenerateGrid(_))
        ));
        assert!(loglog_slope_points(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn single_episode_summary_matches_episode() {
        let p = plan(vec![PolicyKind::Etc], vec![2_000], 1, Some(1));
        let s = run_bench(&p).unwrap();
        assert_eq!(s.rows.len(), 1);
        let (row, ep) = (&s.rows[0], &s.episodes[0]);
        assert_eq!(row.mean_loss, ep.loss);
        assert_eq!(row.mean_revenue, ep.revenue);
        assert_eq!(row.stderr, 0.0);
        assert_eq!(row.mean_shutoff, ep.shutoff.map_or(2_001.0, |v| v as f64));
    }

    #[test]
    fn parallel_and_serial_runs_agree_bytewise() {
        let policies = vec![PolicyKind::Pdnrm, PolicyKind::Clairvoyant, PolicyKind::Etc];
        let a = run_bench(&plan(policies.clone(), vec![1_000, 3_000], 4, Some(1))).unwrap();
        let b = run_bench(&plan(policies, vec![1_000, 3_000], 4, Some(4))).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_summary_csv(&a, &mut ca).unwrap();
        write_summary_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
        let (mut ea, mut eb) = (Vec::new(), Vec::new());
        write_episodes_csv(&a, &mut ea).unwrap();
        write_episodes_csv(&b, &mut eb).unwrap();
        assert_eq!(ea, eb);
        let header = String::from_utf8(ca).unwrap();
        assert!(header.starts_with("policy,T,mean_loss,stderr,mean_revenue,mean_shutoff,wall_ms\n"));
        assert!(String::from_utf8(ea)
            .unwrap()
            .starts_with("policy,T,replicate,seed,revenue,loss,shutoff\n"));
    }

    #[test]
    fn summary_is_invariant_to_replicate_order() {
        let s = run_bench(&plan(vec![PolicyKind::Clairvoyant], vec![1_000], 6, None)).unwrap();
        let mut cell: Vec<&EpisodeResult> = s.episodes.iter().collect();
        let base = summarize(PolicyKind::Clairvoyant, 1_000, &cell);
        cell.reverse();
        let mut shuffled: Vec<EpisodeResult> = cell.into_iter().cloned().collect();
        shuffled.sort_by_key(|e| e.replicate);
        let refs: Vec<&EpisodeResult> = shuffled.iter().collect();
        assert_eq!(summarize(PolicyKind::Clairvoyant, 1_000, &refs), base);
    }

    #[test]
    fn csv_numbers_round_trip() {
        let s = run_bench(&plan(vec![PolicyKind::Etc], vec![1_000, 2_000], 3, None)).unwrap();
        let mut buf = Vec::new();
        write_episodes_csv(&s, &mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        for (rec, ep) in rd.records().zip(&s.episodes) {
            let rec = rec.unwrap();
            assert_eq!(rec[4].parse::<f64>().unwrap(), ep.revenue);
            assert_eq!(rec[5].parse::<f64>().unwrap(), ep.loss);
            assert_eq!(rec[3].parse::<u64>().unwrap(), ep.seed);
        }
    }

    #[test]
    fn plan_validation() {
        let mut f = plan(vec![PolicyKind::Etc], vec![1_000], 1, None).file;
        f.t_grid = vec![2_000, 1_000];
        assert!(BenchPlan::from_file(f.clone(), None).is_err());
        f.t_grid = vec![1_000];
        f.replications = 0;
        assert!(BenchPlan::from_file(f.clone(), None).is_err());
        f.replications = 1;
        f.t_grid = vec![10];
        assert!(BenchPlan::from_file(f, None).is_err());
        let text = r#"{"instance": "x.json", "policies": ["pdnrm"], "T_grid": [1000], "replications": 1,
                      "base_seed": 1, "output_dir": null, "surprise": 1}"#;
        assert!(serde_json::from_str::<BenchPlanFile>(text).is_err());
    }

    #[test]
    fn event_stats_count_loops_per_epoch() {
        let loop_ev = |epoch| AlgorithmEvent::Loop {
            epoch,
            loop_index: 0,
            lambda: vec![],
            price: vec![],
            tilde_price: vec![],
            loop_length: 1,
            periods: 1,
            step: 0.0,
            balancing: crate::sim::BalancingStatus::Feasible,
            clipped: false,
            truncated: false,
        };
        let dual = |epoch| AlgorithmEvent::DualUpdate {
            epoch,
            lambda: vec![],
            next_lambda: vec![],
            eps_bar: 1.0,
            loops: 1,
            grad_q: vec![],
        };
        let ev = vec![
            loop_ev(0),
            dual(0),
            loop_ev(1),
            loop_ev(1),
            loop_ev(1),
            dual(1),
            loop_ev(2),
        ];
        let s = EventStats::from_events(&ev);
        assert_eq!(
            s,
            EventStats {
                dual_updates: 2,
                max_loops_per_epoch: 3,
                loops: 5
            }
        );
    }
}
