//! Discrete-time market: inventory dynamics with the hard shutoff rule,
//! admissible policy sequencing, streaming trace audits and CSV / JSON-lines
//! export.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demand::{sample_from_mean, DemandModel};
use crate::error::{check_dim, Error, Result};
use crate::fluid::{FluidSolution, Instance};
use crate::linalg::Vector;

/// What a policy posts in one period.
#[derive(Debug, Clone, PartialEq)]
pub enum PriceAction {
    Post(Vector),
    /// Close the market for the period; demand is zero.
    Shutoff,
}

impl PriceAction {
    pub fn price(&self) -> Option<&Vector> {
        match self {
            Self::Post(p) => Some(p),
            Self::Shutoff => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalancingStatus {
    Feasible,
    Infeasible,
    /// Probe budget was zero, so no estimate was available to balance with.
    Skipped,
}

/// Per-loop and per-epoch log entries emitted by learning policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AlgorithmEvent {
    Loop {
        epoch: u64,
        loop_index: u64,
        lambda: Vec<f64>,
        price: Vec<f64>,
        tilde_price: Vec<f64>,
        loop_length: u64,
        periods: u64,
        step: f64,
        balancing: BalancingStatus,
        clipped: bool,
        truncated: bool,
    },
    DualUpdate {
        epoch: u64,
        lambda: Vec<f64>,
        next_lambda: Vec<f64>,
        eps_bar: f64,
        loops: u64,
        grad_q: Vec<f64>,
    },
}

/// An admissible pricing policy. The simulator calls `next_price` at the
/// start of a period with everything observed so far already delivered via
/// `observe`. A policy may announce with `commitment` that the action just
/// returned holds for several periods; it still observes each of them.
pub trait Policy {
    fn name(&self) -> &str;

    fn next_price(&mut self, period: u64) -> PriceAction;

    /// Number of periods the last action holds, at least 1.
    fn commitment(&self) -> u64 {
        1
    }

    fn observe(&mut self, period: u64, realized: &Vector);

    fn take_events(&mut self) -> Vec<AlgorithmEvent> {
        Vec::new()
    }
}

/// Inventory levels and shutoff flag.
#[derive(Debug, Clone, PartialEq)]
pub struct InventoryState {
    pub remaining: Vector,
    pub shutoff_period: Option<u64>,
}

impl InventoryState {
    pub fn shut_off(&self) -> bool {
        self.shutoff_period.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodRecord {
    pub period: u64,
    pub price: PriceAction,
    pub realized: Vector,
    pub revenue: f64,
    pub inventory: Vector,
}

/// Streaming checks over a trace that do not need the full record list.
#[derive(Debug, Clone)]
pub struct TraceAudit {
    previous_inventory: Vector,
    shutoff_seen: Option<u64>,
    recomputed_revenue: f64,
    hasher: DefaultHasher,
    pub violations: Vec<String>,
}

impl TraceAudit {
    fn new(initial: &Vector) -> Self {
        Self {
            previous_inventory: initial.clone(),
            shutoff_seen: None,
            recomputed_revenue: 0.0,
            hasher: DefaultHasher::new(),
            violations: Vec::new(),
        }
    }

    fn record(
        &mut self,
        period: u64,
        price: &PriceAction,
        y: &Vector,
        inventory: &Vector,
        shutoff: Option<u64>,
    ) {
        const MAX_LOGGED: usize = 20;
        let flag = |msg: String, v: &mut Vec<String>| {
            if v.len() < MAX_LOGGED {
                v.push(msg);
            }
        };
        if inventory.iter().any(|x| *x < 0.0) {
            flag(
                format!("period {period}: negative inventory {inventory:?}"),
                &mut self.violations,
            );
        }
        if inventory
            .iter()
            .zip(self.previous_inventory.iter())
            .any(|(a, b)| a > b)
        {
            flag(
                format!("period {period}: inventory increased"),
                &mut self.violations,
            );
        }
        if let Some(s) = self.shutoff_seen {
            if s < period && y.iter().any(|x| *x != 0.0) {
                flag(
                    format!("period {period}: positive demand after shutoff at {s}"),
                    &mut self.violations,
                );
            }
            if shutoff != Some(s) {
                flag(
                    format!("period {period}: shutoff flag changed"),
                    &mut self.violations,
                );
            }
        }
        if self.shutoff_seen.is_none() {
            self.shutoff_seen = shutoff;
        }
        self.previous_inventory.copy_from(inventory);

        let mut r = 0.0;
        if let PriceAction::Post(p) = price {
            for i in 0..p.len() {
                r += p[i] * y[i];
            }
            for x in p.iter() {
                self.hasher.write_u64(x.to_bits());
            }
        } else {
            self.hasher.write_u64(u64::MAX);
        }
        self.recomputed_revenue += r;
        self.hasher.write_u64(period);
        for x in y.iter() {
            self.hasher.write_u64(x.to_bits());
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeOptions {
    /// Keep every period record in memory.
    pub record: bool,
    /// Replace the initial inventory `γT`.
    pub inventory: Option<Vector>,
}

#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub policy: String,
    pub seed: u64,
    pub horizon: u64,
    pub records: Vec<PeriodRecord>,
    pub total_revenue: f64,
    pub shutoff_period: Option<u64>,
    pub final_inventory: Vector,
    pub events: Vec<AlgorithmEvent>,
    pub recomputed_revenue: f64,
    pub digest: u64,
    pub violations: Vec<String>,
}

impl EpisodeTrace {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.total_revenue == self.recomputed_revenue
    }

    /// CSV with columns `period, p_1..p_N, y_1..y_N, revenue, inv_1..inv_M`.
    /// A shutoff period writes `inf` for every price.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let Some(first) = self.records.first() else {
            w.flush()?;
            return Ok(());
        };
        let n = first.realized.len();
        let m = first.inventory.len();
        let mut header = vec!["period".to_string()];
        header.extend((1..=n).map(|i| format!("p_{i}")));
        header.extend((1..=n).map(|i| format!("y_{i}")));
        header.push("revenue".into());
        header.extend((1..=m).map(|j| format!("inv_{j}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.period.to_string()];
            match &r.price {
                PriceAction::Post(p) => row.extend(p.iter().map(|x| x.to_string())),
                PriceAction::Shutoff => row.extend((0..n).map(|_| "inf".to_string())),
            }
            row.extend(r.realized.iter().map(|x| x.to_string()));
            row.push(r.revenue.to_string());
            row.extend(r.inventory.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn write_events<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Aggregate outcome of committing one price for several periods.
#[derive(Debug, Clone)]
pub struct CommitOutcome {
    pub periods: u64,
    pub demand_sum: Vector,
}

/// Block-level view of a market used by the learning routines: commit a
/// price for `k` periods and get back the summed realized demand.
pub trait Environment {
    fn dim(&self) -> usize;

    fn remaining(&self) -> u64;

    fn commit(&mut self, price: &Vector, k: u64) -> Result<CommitOutcome>;
}

/// Noiseless environment returning `k · D(p)` in O(1) regardless of `k`.
pub struct OracleEnvironment<'a, M: DemandModel + ?Sized> {
    pub model: &'a M,
    pub budget: u64,
    pub calls: u64,
}

impl<'a, M: DemandModel + ?Sized> OracleEnvironment<'a, M> {
    pub fn new(model: &'a M, budget: u64) -> Self {
        Self {
            model,
            budget,
            calls: 0,
        }
    }
}

impl<M: DemandModel + ?Sized> Environment for OracleEnvironment<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn remaining(&self) -> u64 {
        self.budget
    }

    fn commit(&mut self, price: &Vector, k: u64) -> Result<CommitOutcome> {
        let k = k.min(self.budget);
        self.budget -= k;
        self.calls += 1;
        Ok(CommitOutcome {
            periods: k,
            demand_sum: self.model.mean(price) * k as f64,
        })
    }
}

/// The simulated market for one episode.
pub struct Market<'a> {
    inst: &'a Instance,
    rng: ChaCha8Rng,
    period: u64,
    state: InventoryState,
    revenue: f64,
    cache: Option<(Vector, Vector)>,
    audit: TraceAudit,
    records: Option<Vec<PeriodRecord>>,
}

impl<'a> Market<'a> {
    pub fn new(inst: &'a Instance, seed: u64, opts: &EpisodeOptions) -> Result<Self> {
        let inventory = match &opts.inventory {
            Some(c) => {
                check_dim(inst.m, c.len())?;
                c.clone()
            }
            None => inst.inventory(),
        };
        Ok(Self {
            inst,
            rng: ChaCha8Rng::seed_from_u64(seed),
            period: 0,
            audit: TraceAudit::new(&inventory),
            state: InventoryState {
                remaining: inventory,
                shutoff_period: None,
            },
            revenue: 0.0,
            cache: None,
            records: opts.record.then(Vec::new),
        })
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    pub fn state(&self) -> &InventoryState {
        &self.state
    }

    pub fn revenue(&self) -> f64 {
        self.revenue
    }

    fn mean_at(&mut self, p: &Vector) -> Vector {
        if let Some((cp, cd)) = &self.cache {
            if cp == p {
                return cd.clone();
            }
        }
        let d = self.inst.demand.mean(p);
        self.cache = Some((p.clone(), d.clone()));
        d
    }

    /// Advance one period under `action` and return realized demand.
    pub fn step(&mut self, action: &PriceAction) -> Result<Vector> {
        if self.period >= self.inst.horizon {
            return Err(Error::InvalidConfig(format!(
                "horizon {} already elapsed",
                self.inst.horizon
            )));
        }
        self.period += 1;
        let t = self.period;
        let n = self.inst.n;
        let mut y = Vector::zeros(n);
        if let PriceAction::Post(p) = action {
            check_dim(n, p.len())?;
            if p.iter()
                .any(|x| !(*x >= self.inst.price_min && *x <= self.inst.price_max))
            {
                return Err(Error::PriceOutOfBox {
                    period: t,
                    price: p.iter().cloned().collect(),
                    lo: self.inst.price_min,
                    hi: self.inst.price_max,
                });
            }
            if !self.state.shut_off() {
                let mean = self.mean_at(p);
                let draw = sample_from_mean(&mean, &mut self.rng, self.inst.noise);
                if draw.iter().any(|x| *x != 0.0) {
                    let usage = &self.inst.a * &draw;
                    let short = usage
                        .iter()
                        .zip(self.state.remaining.iter())
                        .any(|(u, c)| *u > *c + 1e-9 * c.abs().max(1.0));
                    if short {
                        self.state.shutoff_period = Some(t);
                    } else {
                        for j in 0..usage.len() {
                            self.state.remaining[j] = (self.state.remaining[j] - usage[j]).max(0.0);
                        }
                        y = draw;
                    }
                }
            }
        }
        let mut r = 0.0;
        if let PriceAction::Post(p) = action {
            for i in 0..n {
                r += p[i] * y[i];
            }
        }
        self.revenue += r;
        self.audit.record(
            t,
            action,
            &y,
            &self.state.remaining,
            self.state.shutoff_period,
        );
        if let Some(recs) = &mut self.records {
            recs.push(PeriodRecord {
                period: t,
                price: action.clone(),
                realized: y.clone(),
                revenue: r,
                inventory: self.state.remaining.clone(),
            });
        }
        Ok(y)
    }

    pub fn finish(self, policy: String, seed: u64, events: Vec<AlgorithmEvent>) -> EpisodeTrace {
        EpisodeTrace {
            policy,
            seed,
            horizon: self.inst.horizon,
            records: self.records.unwrap_or_default(),
            total_revenue: self.revenue,
            shutoff_period: self.state.shutoff_period,
            final_inventory: self.state.remaining,
            events,
            recomputed_revenue: self.audit.recomputed_revenue,
            digest: self.audit.hasher.finish(),
            violations: self.audit.violations,
        }
    }
}

impl Environment for Market<'_> {
    fn dim(&self) -> usize {
        self.inst.n
    }

    fn remaining(&self) -> u64 {
        self.inst.horizon - self.period
    }

    fn commit(&mut self, price: &Vector, k: u64) -> Result<CommitOutcome> {
        let k = k.min(self.remaining());
        let action = PriceAction::Post(price.clone());
        let mut sum = Vector::zeros(self.inst.n);
        for _ in 0..k {
            sum += self.step(&action)?;
        }
        Ok(CommitOutcome {
            periods: k,
            demand_sum: sum,
        })
    }
}

/// Run `policy` for the full horizon with RNG seeded from `seed`.
pub fn run_episode(
    inst: &Instance,
    policy: &mut dyn Policy,
    seed: u64,
    opts: &EpisodeOptions,
) -> Result<EpisodeTrace> {
    let mut market = Market::new(inst, seed, opts)?;
    let mut events = Vec::new();
    while market.period() < inst.horizon {
        let t = market.period() + 1;
        let action = policy.next_price(t);
        let hold = policy
            .commitment()
            .max(1)
            .min(inst.horizon - market.period());
        for k in 0..hold {
            let y = market.step(&action)?;
            policy.observe(t + k, &y);
        }
        events.extend(policy.take_events());
    }
    events.extend(policy.take_events());
    Ok(market.finish(policy.name().to_string(), seed, events))
}

/// `(Tφ(d*) − revenue) / (Tφ(d*))`.
pub fn percentage_loss(inst: &Instance, fluid: &FluidSolution, total_revenue: f64) -> f64 {
    let bound = inst.horizon as f64 * fluid.value;
    (bound - total_revenue) / bound
}

/// Replicate seed derivation: a splitmix64 finalizer over `base ⊕ φ·(i+1)`.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Posts a fixed price every period.
#[derive(Debug, Clone)]
pub struct FixedPricePolicy {
    pub price: Vector,
    pub label: String,
}

impl FixedPricePolicy {
    pub fn new(price: Vector) -> Self {
        Self {
            price,
            label: "fixed".into(),
        }
    }
}

impl Policy for FixedPricePolicy {
    fn name(&self) -> &str {
        &self.label
    }
    fn next_price(&mut self, _period: u64) -> PriceAction {
        PriceAction::Post(self.price.clone())
    }
    fn commitment(&self) -> u64 {
        u64::MAX
    }
    fn observe(&mut self, _period: u64, _realized: &Vector) {}
}
