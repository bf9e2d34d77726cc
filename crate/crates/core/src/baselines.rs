//! Comparison policies: the clairvoyant fluid price and an
//! explore-then-commit grid policy that commits to an empirical fluid
//! mixture over grid prices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluid::{FluidSolution, Instance};
use crate::linalg::{Matrix, Vector};
use crate::sim::{FixedPricePolicy, Policy, PriceAction};

/// Posts `p*` every period.
pub fn clairvoyant_policy(fluid: &FluidSolution) -> FixedPricePolicy {
    FixedPricePolicy {
        price: fluid.p_star.clone(),
        label: "clairvoyant".into(),
    }
}

pub const DEFAULT_GRID_POINTS: usize = 8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtcConfigFile {
    pub grid_points_per_axis: Option<usize>,
    pub exploration_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtcConfig {
    pub grid_points_per_axis: usize,
    pub exploration_fraction: f64,
}

impl EtcConfig {
    /// Default fraction `clamp(G^{1/3} T^{-1/3}, 0.05, 0.5)` with `G` grid points.
    pub fn resolve(file: &EtcConfigFile, inst: &Instance) -> Result<Self> {
        let k = file.grid_points_per_axis.unwrap_or(DEFAULT_GRID_POINTS);
        let g = (k as f64).powi(inst.n as i32);
        let fraction = file
            .exploration_fraction
            .unwrap_or_else(|| (g / inst.horizon as f64).cbrt().clamp(0.05, 0.5));
        let cfg = Self {
            grid_points_per_axis: k,
            exploration_fraction: fraction,
        };
        cfg.validate(inst)?;
        Ok(cfg)
    }

    pub fn grid_size(&self, n: usize) -> u64 {
        (self.grid_points_per_axis as u64).saturating_pow(n as u32)
    }

    pub fn exploration_periods(&self, horizon: u64) -> u64 {
        ((self.exploration_fraction * horizon as f64).ceil() as u64).min(horizon)
    }

    pub fn validate(&self, inst: &Instance) -> Result<()> {
        if self.grid_points_per_axis < 2 {
            return Err(Error::InvalidConfig(
                "grid_points_per_axis must be at least 2".into(),
            ));
        }
        if !(self.exploration_fraction > 0.0 && self.exploration_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "exploration_fraction must be in (0, 1], got {}",
                self.exploration_fraction
            )));
        }
        let g = self.grid_size(inst.n);
        if self.exploration_periods(inst.horizon) < g {
            return Err(Error::InvalidConfig(format!(
                "exploration budget {} is below the grid size {g}",
                self.exploration_periods(inst.horizon)
            )));
        }
        Ok(())
    }
}

/// Tensor grid with `k` points per axis over `[lo, hi]ᴺ`, first coordinate
/// varying slowest.
pub fn price_grid(n: usize, k: usize, lo: f64, hi: f64) -> Vec<Vector> {
    let axis: Vec<f64> = (0..k)
        .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
        .collect();
    let total = k.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = Vector::zeros(n);
            for i in (0..n).rev() {
                p[i] = axis[idx % k];
                idx /= k;
            }
            p
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vector,
    pub value: f64,
    pub pivots: usize,
}

/// `max cᵀx` subject to `Ax ≤ b`, `x ≥ 0`, with `b ≥ 0`, by the dense
/// tableau simplex method with Bland's rule starting from the slack basis.
pub fn solve_packing_lp(
    c: &Vector,
    a: &Matrix,
    b: &Vector,
    max_pivots: usize,
) -> Result<LpSolution> {
    let (m, n) = a.shape();
    if c.len() != n || b.len() != m {
        return Err(Error::Dimension {
            expected: n,
            got: c.len(),
        });
    }
    if b.iter().any(|v| !(*v >= 0.0)) || c.iter().chain(a.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInstance(
            "packing LP needs finite data and b ≥ 0".into(),
        ));
    }
    let width = n + m + 1;
    let mut t = Matrix::zeros(m + 1, width);
    for i in 0..m {
        for j in 0..n {
            t[(i, j)] = a[(i, j)];
        }
        t[(i, n + i)] = 1.0;
        t[(i, width - 1)] = b[i];
    }
    for j in 0..n {
        t[(m, j)] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let eps = 1e-12;
    let mut pivots = 0;
    loop {
        let Some(enter) = (0..n + m).find(|&j| t[(m, j)] < -eps) else {
            break;
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[(i, enter)] > eps {
                let ratio = t[(i, width - 1)] / t[(i, enter)];
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((r, best))
                        if ratio < best - eps || (ratio <= best + eps && basis[i] < basis[r]) =>
                    {
                        Some((i, ratio))
                    }
                    keep => keep,
                };
            }
        }
        let Some((row, _)) = leave else {
            return Err(Error::InvalidInstance("packing LP is unbounded".into()));
        };
        if pivots == max_pivots {
            return Err(Error::NonConvergence {
                what: "simplex",
                iterations: pivots,
                residual: t[(m, enter)],
            });
        }
        let pv = t[(row, enter)];
        for j in 0..width {
            t[(row, j)] /= pv;
        }
        for i in 0..=m {
            if i != row {
                let f = t[(i, enter)];
                if f != 0.0 {
                    for j in 0..width {
                        t[(i, j)] -= f * t[(row, j)];
                    }
                }
            }
        }
        basis[row] = enter;
        pivots += 1;
    }
    let mut x = Vector::zeros(n);
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = t[(i, width - 1)].max(0.0);
        }
    }
    Ok(LpSolution {
        value: c.dot(&x),
        x,
        pivots,
    })
}

/// Empirical fluid program over grid mixtures: weights `w ≥ 0` with
/// `Σw ≤ 1` and `Σ w_k A d̂_k ≤ γ`, maximizing `Σ w_k ⟨p_k, d̂_k⟩`.
pub fn grid_mixture_lp(
    grid: &[Vector],
    demand: &[Vector],
    a: &Matrix,
    gamma: &Vector,
) -> Result<LpSolution> {
    let g = grid.len();
    let m = a.nrows();
    let mut lhs = Matrix::zeros(m + 1, g);
    let mut c = Vector::zeros(g);
    for (k, (p, d)) in grid.iter().zip(demand).enumerate() {
        c[k] = p.dot(d);
        let use_k = a * d;
        for j in 0..m {
            lhs[(j, k)] = use_k[j];
        }
        lhs[(m, k)] = 1.0;
    }
    let mut b = Vector::from_element(m + 1, 1.0);
    b.rows_mut(0, m).copy_from(gamma);
    solve_packing_lp(&c, &lhs, &b, 10_000)
}

/// Largest-deficit interleaving of a mixture over periods: at step `s` pick
/// the option maximizing `w_k (s + 1) − played_k`, lowest index on ties.
#[derive(Debug, Clone)]
pub struct MixtureSchedule {
    weights: Vec<f64>,
    played: Vec<u64>,
    step: u64,
}

impl MixtureSchedule {
    pub fn new(weights: Vec<f64>) -> Self {
        let played = vec![0; weights.len()];
        Self {
            weights,
            played,
            step: 0,
        }
    }

    pub fn next_option(&mut self) -> usize {
        let s = (self.step + 1) as f64;
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (k, w) in self.weights.iter().enumerate() {
            let deficit = w * s - self.played[k] as f64;
            if deficit > best_deficit {
                best = k;
                best_deficit = deficit;
            }
        }
        self.played[best] += 1;
        self.step += 1;
        best
    }

    pub fn played(&self) -> &[u64] {
        &self.played
    }
}

#[derive(Debug, Clone)]
enum EtcPhase {
    Explore,
    Commit {
        options: Vec<Option<Vector>>,
        schedule: MixtureSchedule,
    },
}

/// Explore a price grid round-robin, then commit to the empirical fluid
/// mixture; a null option closes the market for its share of periods.
#[derive(Debug, Clone)]
pub struct EtcPolicy {
    grid: Vec<Vector>,
    sums: Vec<Vector>,
    counts: Vec<u64>,
    a: Matrix,
    gamma: Vector,
    explore_periods: u64,
    horizon: u64,
    seen: u64,
    last: Option<usize>,
    phase: EtcPhase,
    /// Weights of the committed mixture (grid points then null), once known.
    pub committed: Option<Vec<f64>>,
    pub fell_back: bool,
}

impl EtcPolicy {
    pub fn new(inst: &Instance, cfg: &EtcConfig) -> Result<Self> {
        cfg.validate(inst)?;
        let grid = price_grid(
            inst.n,
            cfg.grid_points_per_axis,
            inst.price_min,
            inst.price_max,
        );
        let g = grid.len();
        let mut s = Self {
            sums: vec![Vector::zeros(inst.n); g],
            counts: vec![0; g],
            grid,
            a: inst.a.clone(),
            gamma: inst.gamma.clone(),
            explore_periods: cfg.exploration_periods(inst.horizon),
            horizon: inst.horizon,
            seen: 0,
            last: None,
            phase: EtcPhase::Explore,
            committed: None,
            fell_back: false,
        };
        if s.explore_periods == 0 {
            s.commit();
        }
        Ok(s)
    }

    pub fn grid(&self) -> &[Vector] {
        &self.grid
    }

    fn commit(&mut self) {
        let g = self.grid.len();
        let averages: Vec<Vector> = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| {
                if c > 0 {
                    s / c as f64
                } else {
                    s.map(|_| f64::NAN)
                }
            })
            .collect();
        let mut options: Vec<Option<Vector>> = self.grid.iter().cloned().map(Some).collect();
        options.push(None);
        let weights = match grid_mixture_lp(&self.grid, &averages, &self.a, &self.gamma) {
            Ok(sol) => {
                let mut w: Vec<f64> = sol.x.iter().cloned().collect();
                w.push((1.0 - sol.x.sum()).max(0.0));
                w
            }
            Err(_) => {
                self.fell_back = true;
                let top = (0..g)
                    .max_by(|&i, &j| {
                        self.grid[i]
                            .sum()
                            .total_cmp(&self.grid[j].sum())
                            .then(j.cmp(&i))
                    })
                    .unwrap_or(0);
                let mut w = vec![0.0; g + 1];
                w[top] = 1.0;
                w
            }
        };
        self.committed = Some(weights.clone());
        self.phase = EtcPhase::Commit {
            options,
            schedule: MixtureSchedule::new(weights),
        };
    }
}

impl Policy for EtcPolicy {
    fn name(&self) -> &str {
        "etc"
    }

    fn next_price(&mut self, _period: u64) -> PriceAction {
        match &mut self.phase {
            EtcPhase::Explore => {
                let k = (self.seen % self.grid.len() as u64) as usize;
                self.last = Some(k);
                PriceAction::Post(self.grid[k].clone())
            }
            EtcPhase::Commit { options, schedule } => {
                self.last = None;
                match &options[schedule.next_option()] {
                    Some(p) => PriceAction::Post(p.clone()),
                    None => PriceAction::Shutoff,
                }
            }
        }
    }

    fn observe(&mut self, _period: u64, realized: &Vector) {
        if let Some(k) = self.last.take() {
            self.sums[k] += realized;
            self.counts[k] += 1;
        }
        self.seen += 1;
        if matches!(self.phase, EtcPhase::Explore)
            && self.seen == self.explore_periods
            && self.seen < self.horizon
        {
            self.commit();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{revenue_f, DemandModel, NoiseMode};
    use crate::fluid::solve_fluid;
    use crate::sim::{run_episode, EpisodeOptions};
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    /// Brute force over all vertices of `{x ≥ 0 : Ax ≤ b}` for tiny LPs.
    fn brute_force_lp(c: &Vector, a: &Matrix, b: &Vector) -> f64 {
        let (m, n) = a.shape();
        let mut full = Matrix::zeros(m + n, n);
        let mut rhs = Vector::zeros(m + n);
        full.rows_mut(0, m).copy_from(a);
        rhs.rows_mut(0, m).copy_from(b);
        for j in 0..n {
            full[(m + j, j)] = -1.0;
        }
        let rows = m + n;
        let mut best = f64::NEG_INFINITY;
        let mut pick = vec![0usize; n];
        fn rec(
            start: usize,
            depth: usize,
            pick: &mut Vec<usize>,
            rows: usize,
            full: &Matrix,
            rhs: &Vector,
            c: &Vector,
            best: &mut f64,
        ) {
            let n = pick.len();
            if depth == n {
                let sub = Matrix::from_fn(n, n, |i, j| full[(pick[i], j)]);
                let r = Vector::from_fn(n, |i, _| rhs[pick[i]]);
                if let Some(x) = sub.lu().solve(&r) {
                    if (full * &x - rhs).iter().all(|v| *v <= 1e-9) {
                        *best = best.max(c.dot(&x));
                    }
                }
                return;
            }
            for i in start..rows {
                pick[depth] = i;
                rec(i + 1, depth + 1, pick, rows, full, rhs, c, best);
            }
        }
        rec(0, 0, &mut pick, rows, &full, &rhs, c, &mut best);
        best
    }

    #[test]
    fn simplex_small_example() {
        // max 3x + 2y, x + y ≤ 4, x + 3y ≤ 6, x ≤ 3 → (3, 1), value 11
        let a = Matrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 3.0, 1.0, 0.0]);
        let sol = solve_packing_lp(&v(&[3.0, 2.0]), &a, &v(&[4.0, 6.0, 3.0]), 100).unwrap();
        assert!((sol.value - 11.0).abs() < 1e-12);
        assert!((sol.x - v(&[3.0, 1.0])).amax() < 1e-12);
    }

    #[test]
    fn simplex_detects_unbounded() {
        let a = Matrix::from_row_slice(1, 2, &[1.0, -1.0]);
        assert!(solve_packing_lp(&v(&[0.0, 1.0]), &a, &v(&[1.0]), 100).is_err());
    }

    proptest! {
        #[test]
        fn simplex_matches_vertex_enumeration(
            c in prop::collection::vec(-1.0f64..3.0, 4),
            a in prop::collection::vec(0.0f64..2.0, 12),
            b in prop::collection::vec(0.0f64..2.0, 3),
        ) {
            let c = Vector::from_vec(c);
            let mut a = Matrix::from_row_slice(3, 4, &a);
            // keep the feasible set bounded
            for j in 0..4 {
                a[(0, j)] += 0.1;
            }
            let b = Vector::from_vec(b);
            let sol = solve_packing_lp(&c, &a, &b, 1000).unwrap();
            prop_assert!((&a * &sol.x - &b).iter().all(|v| *v <= 1e-9));
            prop_assert!(sol.x.iter().all(|v| *v >= 0.0));
            let best = brute_force_lp(&c, &a, &b);
            prop_assert!((sol.value - best).abs() <= 1e-8 * (1.0 + best.abs()), "{} vs {}", sol.value, best);
        }
    }

    #[test]
    fn grid_is_lexicographic_and_spans_box() {
        let g = price_grid(2, 3, 1.0, 2.0);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], v(&[1.0, 1.0]));
        assert_eq!(g[1], v(&[1.0, 1.5]));
        assert_eq!(g[3], v(&[1.5, 1.0]));
        assert_eq!(g[8], v(&[2.0, 2.0]));
    }

    #[test]
    fn default_exploration_rule() {
        let inst = Instance::two_product_example(1_000);
        let cfg = EtcConfig::resolve(&EtcConfigFile::default(), &inst).unwrap();
        assert_eq!(cfg.grid_points_per_axis, 8);
        assert!((cfg.exploration_fraction - 0.4).abs() < 1e-12);
        let big =
            EtcConfig::resolve(&EtcConfigFile::default(), &inst.with_horizon(10_000_000)).unwrap();
        assert_eq!(big.exploration_fraction, 0.05);
        let tiny = EtcConfigFile {
            exploration_fraction: Some(0.01),
            ..Default::default()
        };
        assert!(EtcConfig::resolve(&tiny, &inst).is_err());
        let one = EtcConfigFile {
            grid_points_per_axis: Some(1),
            ..Default::default()
        };
        assert!(EtcConfig::resolve(&one, &inst).is_err());
    }

    #[test]
    fn mixture_schedule_tracks_weights() {
        let mut s = MixtureSchedule::new(vec![0.5, 0.3, 0.2]);
        for step in 1..=1000u64 {
            s.next_option();
            for (k, w) in [0.5, 0.3, 0.2].iter().enumerate() {
                assert!((s.played()[k] as f64 - w * step as f64).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn clairvoyant_revenue_is_fluid_value_when_slack() {
        let base = Instance::two_product_example(10_000).with_noise(NoiseMode::None);
        let mut inst = base.clone();
        inst.gamma = v(&[0.5, 0.5]);
        let sol = solve_fluid(&inst, 1e-10).unwrap();
        assert!(sol.binding_mask.iter().all(|b| !b));
        let mut pol = clairvoyant_policy(&sol);
        let trace = run_episode(
            &inst,
            &mut pol,
            1,
            &EpisodeOptions {
                record: true,
                inventory: None,
            },
        )
        .unwrap();
        let expect = inst.horizon as f64 * revenue_f(&inst.demand, &sol.p_star);
        assert!((trace.total_revenue - expect).abs() <= 1e-9 * expect);
        assert!((trace.total_revenue - inst.horizon as f64 * sol.value).abs() <= 1e-6 * expect);
        assert!(trace
            .records
            .iter()
            .all(|r| r.price == PriceAction::Post(sol.p_star.clone())));
    }

    /// Independent oracle: the best mixture of at most three grid points
    /// (plus the null option), found by checking every support.
    fn grid_fluid_value(inst: &Instance, grid: &[Vector]) -> f64 {
        let d: Vec<Vector> = grid.iter().map(|p| inst.demand.mean(p)).collect();
        let r: Vec<f64> = grid.iter().zip(&d).map(|(p, d)| p.dot(d)).collect();
        let u: Vec<Vector> = d.iter().map(|d| &inst.a * d).collect();
        let g = grid.len();
        let feasible = |w: &[(usize, f64)]| {
            let tot: f64 = w.iter().map(|x| x.1).sum();
            let mut load = Vector::zeros(inst.m);
            for &(k, wk) in w {
                load += &u[k] * wk;
            }
            w.iter().all(|x| x.1 >= -1e-12)
                && tot <= 1.0 + 1e-12
                && (load - &inst.gamma).iter().all(|v| *v <= 1e-12)
        };
        let value = |w: &[(usize, f64)]| w.iter().map(|&(k, wk)| wk * r[k]).sum::<f64>();
        let mut best = 0.0f64;
        // a vertex has at most M + 1 = 3 positive weights, each fixed by
        // tight constraints among {load_1, load_2, Σw}
        let rows = |k: usize| [u[k][0], u[k][1], 1.0];
        let rhs = [inst.gamma[0], inst.gamma[1], 1.0];
        for i in 0..g {
            for t in 0..3 {
                let w = rhs[t] / rows(i)[t];
                if w.is_finite() && feasible(&[(i, w)]) {
                    best = best.max(value(&[(i, w)]));
                }
            }
            for j in i + 1..g {
                for (s, t) in [(0, 1), (0, 2), (1, 2)] {
                    let m2 = Matrix::from_row_slice(
                        2,
                        2,
                        &[rows(i)[s], rows(j)[s], rows(i)[t], rows(j)[t]],
                    );
                    if let Some(w) = m2.lu().solve(&v(&[rhs[s], rhs[t]])) {
                        let ws = [(i, w[0]), (j, w[1])];
                        if feasible(&ws) {
                            best = best.max(value(&ws));
                        }
                    }
                }
                for k in j + 1..g {
                    let m3 = Matrix::from_fn(3, 3, |a, b| rows([i, j, k][b])[a]);
                    if let Some(w) = m3.lu().solve(&v(&rhs)) {
                        let ws = [(i, w[0]), (j, w[1]), (k, w[2])];
                        if feasible(&ws) {
                            best = best.max(value(&ws));
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn noiseless_exploration_recovers_grid_fluid_program() {
        let inst = Instance::two_product_example(10_000).with_noise(NoiseMode::None);
        let cfg = EtcConfig::resolve(&EtcConfigFile::default(), &inst).unwrap();
        let mut pol = EtcPolicy::new(&inst, &cfg).unwrap();
        run_episode(&inst, &mut pol, 3, &EpisodeOptions::default()).unwrap();
        let w = pol.committed.clone().unwrap();
        let grid = pol.grid().to_vec();
        let value: f64 = grid
            .iter()
            .zip(&w)
            .map(|(p, wk)| wk * revenue_f(&inst.demand, p))
            .sum();
        let oracle = grid_fluid_value(&inst, &grid);
        assert!((value - oracle).abs() < 1e-9, "{value} vs {oracle}");
        let sol = solve_fluid(&inst, 1e-10).unwrap();
        assert!(value <= sol.value + 1e-9);
        assert!(value >= sol.value - 0.02, "{value} vs {}", sol.value);
        assert!(!pol.fell_back);
    }

    #[test]
    fn full_exploration_never_commits() {
        let inst = Instance::two_product_example(1_000);
        let cfg = EtcConfig {
            grid_points_per_axis: 4,
            exploration_fraction: 1.0,
        };
        let mut pol = EtcPolicy::new(&inst, &cfg).unwrap();
        let grid = pol.grid().to_vec();
        let trace = run_episode(
            &inst,
            &mut pol,
            8,
            &EpisodeOptions {
                record: true,
                inventory: None,
            },
        )
        .unwrap();
        assert!(pol.committed.is_none());
        for (t, r) in trace.records.iter().enumerate() {
            if trace.shutoff_period.map_or(true, |s| (t as u64) < s) {
                assert_eq!(r.price, PriceAction::Post(grid[t % grid.len()].clone()));
            }
        }
    }

    #[test]
    fn unusable_estimates_fall_back_to_top_price() {
        let inst = Instance::two_product_example(1_000);
        let cfg = EtcConfig {
            grid_points_per_axis: 3,
            exploration_fraction: 0.1,
        };
        let mut pol = EtcPolicy::new(&inst, &cfg).unwrap();
        pol.sums[0] = v(&[f64::NAN, 0.0]);
        pol.counts[0] = 1;
        pol.commit();
        assert!(pol.fell_back);
        let w = pol.committed.clone().unwrap();
        assert_eq!(w[8], 1.0);
        assert_eq!(pol.next_price(1), PriceAction::Post(v(&[5.0, 5.0])));
    }
}
