//! Problem instances and the clairvoyant fluid oracle: the Lagrangian in
//! price and demand coordinates, the dual function and its gradient, and a
//! certified primal/dual solve of `max φ(d) s.t. Ad ≤ γ`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::demand::{
    estimate_regularity, revenue_f, revenue_gradient, revenue_phi, tensor_grid, DemandCurve,
    DemandModel, DemandSpec, NoiseMode, RegularityConstants,
};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{min_singular, Matrix, Vector};
use crate::projection::{BoxBounds, Halfspace, Polyhedron};

const PROJ_SWEEPS: usize = 100_000;
const PROJ_TOL: f64 = 1e-13;

/// On-disk form of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    /// Row-major `M × N`.
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub gamma: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: u64,
    pub price_min: f64,
    pub price_max: f64,
    pub demand: DemandSpec,
    #[serde(default)]
    pub noise: NoiseMode,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub n: usize,
    pub m: usize,
    pub a: Matrix,
    pub gamma: Vector,
    pub horizon: u64,
    pub price_min: f64,
    pub price_max: f64,
    pub demand: DemandCurve,
    pub noise: NoiseMode,
}

impl Instance {
    pub fn new(
        a: Matrix,
        gamma: Vector,
        horizon: u64,
        price_min: f64,
        price_max: f64,
        demand: DemandCurve,
        noise: NoiseMode,
    ) -> Result<Self> {
        let inst = Self {
            n: a.ncols(),
            m: a.nrows(),
            a,
            gamma,
            horizon,
            price_min,
            price_max,
            demand,
            noise,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Two products, two resources, logit demand on `[0.8, 5]²`.
    pub fn two_product_example(horizon: u64) -> Self {
        Self::new(
            Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 2.0]),
            Vector::from_row_slice(&[0.1, 0.1]),
            horizon,
            0.8,
            5.0,
            DemandCurve::logit(vec![0.4, 0.8], vec![1.5, 2.0]).expect("valid logit parameters"),
            NoiseMode::Multinomial,
        )
        .expect("valid example instance")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInstance(msg));
        check_dim(self.n, self.demand.dim())?;
        check_dim(self.m, self.gamma.len())?;
        if self.n == 0 || self.m == 0 {
            return bad("N and M must be positive".into());
        }
        if self.m > self.n {
            return bad(format!("M = {} exceeds N = {}", self.m, self.n));
        }
        if self.a.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return bad("consumption matrix must be nonnegative and finite".into());
        }
        if min_singular(&self.a) <= 1e-12 * self.a.amax().max(1.0) {
            return bad("consumption matrix must have full row rank".into());
        }
        if self.gamma.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return bad("gamma must be positive".into());
        }
        if self.horizon < 1 {
            return bad("T must be at least 1".into());
        }
        if !(self.price_min < self.price_max)
            || !self.price_min.is_finite()
            || !self.price_max.is_finite()
        {
            return bad(format!(
                "empty price box [{}, {}]",
                self.price_min, self.price_max
            ));
        }
        if self.noise == NoiseMode::Multinomial && self.n <= 16 {
            // D is monotone per coordinate for both models, so vertices bound the image.
            for v in tensor_grid(&self.price_box(), 2) {
                let d = self.demand.mean(&v);
                if d.iter().any(|x| *x < 0.0) || d.sum() > 1.0 {
                    return bad("multinomial noise needs demand in the probability simplex".into());
                }
            }
        }
        Ok(())
    }

    pub fn from_file_spec(spec: &InstanceFile) -> Result<Self> {
        if spec.a.len() != spec.m * spec.n {
            return Err(Error::Dimension {
                expected: spec.m * spec.n,
                got: spec.a.len(),
            });
        }
        Self::new(
            Matrix::from_row_slice(spec.m, spec.n, &spec.a),
            Vector::from_column_slice(&spec.gamma),
            spec.horizon,
            spec.price_min,
            spec.price_max,
            DemandCurve::from_spec(&spec.demand)?,
            spec.noise,
        )
    }

    pub fn to_file_spec(&self) -> InstanceFile {
        InstanceFile {
            n: self.n,
            m: self.m,
            a: self.a.transpose().iter().cloned().collect(),
            gamma: self.gamma.iter().cloned().collect(),
            horizon: self.horizon,
            price_min: self.price_min,
            price_max: self.price_max,
            demand: self.demand.spec(),
            noise: self.noise,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file_spec(&serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn with_horizon(&self, horizon: u64) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    pub fn with_noise(&self, noise: NoiseMode) -> Self {
        Self {
            noise,
            ..self.clone()
        }
    }

    pub fn price_box(&self) -> BoxBounds {
        BoxBounds::uniform(self.n, self.price_min, self.price_max)
    }

    /// Initial inventory `C = γT`.
    pub fn inventory(&self) -> Vector {
        &self.gamma * self.horizon as f64
    }

    pub fn resource_halfspaces(&self) -> Vec<Halfspace> {
        (0..self.m)
            .map(|j| Halfspace::new(self.a.row(j).transpose(), self.gamma[j]))
            .collect()
    }

    pub fn demand_image(&self) -> Polyhedron {
        self.demand.image(&self.price_box())
    }

    /// Demand image intersected with `Ad ≤ γ`.
    pub fn fluid_region(&self) -> Polyhedron {
        let mut poly = self.demand_image();
        poly.halfspaces.extend(self.resource_halfspaces());
        poly
    }

    pub fn regularity(&self, grid_points: usize) -> Result<RegularityConstants> {
        estimate_regularity(
            &self.demand,
            &self.a,
            &self.gamma,
            &self.price_box(),
            self.noise,
            grid_points,
        )
    }

    /// Largest per-axis grid size keeping the scan under roughly `budget` points.
    pub fn default_grid(&self, budget: usize) -> usize {
        let k = (budget as f64).powf(1.0 / self.n as f64).floor() as usize;
        k.clamp(2, 41)
    }
}

/// `L(λ, p) = f(p) − ⟨λ, AD(p) − γ⟩`.
pub fn lagrangian_l(inst: &Instance, lambda: &Vector, p: &Vector) -> f64 {
    let d = inst.demand.mean(p);
    p.dot(&d) - lambda.dot(&(&inst.a * d - &inst.gamma))
}

/// `∇_p L(λ, p) = ∇f(p) − J_D(p)ᵀ Aᵀ λ`.
pub fn lagrangian_grad_p(inst: &Instance, lambda: &Vector, p: &Vector) -> Vector {
    revenue_gradient(&inst.demand, p)
        - inst.demand.jacobian(p).transpose() * (inst.a.transpose() * lambda)
}

/// `H(λ, d) = φ(d) − ⟨λ, Ad − γ⟩`.
pub fn lagrangian_h(inst: &Instance, lambda: &Vector, d: &Vector) -> Result<f64> {
    Ok(revenue_phi(&inst.demand, d)? - lambda.dot(&(&inst.a * d - &inst.gamma)))
}

#[derive(Debug, Clone)]
pub struct AscentOutcome {
    pub point: Vector,
    pub iterations: usize,
    /// Norm of the last accepted gradient-mapping step `‖Δ‖/t`.
    pub gradient_map: f64,
}

/// Projected gradient ascent on a smooth concave function given its
/// gradient. The step is backtracked until the local curvature estimate
/// `−⟨g⁺ − g, Δ⟩ ≤ ‖Δ‖²/t` holds and is doubled after every accepted step.
pub(crate) fn projected_ascent<G, P>(
    start: Vector,
    mut grad: G,
    project: P,
    tol: f64,
    max_iter: usize,
    what: &'static str,
) -> Result<AscentOutcome>
where
    G: FnMut(&Vector) -> Result<Vector>,
    P: Fn(&Vector) -> Result<Vector>,
{
    let mut x = project(&start)?;
    let mut g = grad(&x)?;
    let mut t = 1e-2;
    let mut last_map = f64::INFINITY;
    for it in 1..=max_iter {
        let (cand, g_new, delta) = loop {
            let cand = project(&(&x + &g * t))?;
            let delta = &cand - &x;
            let dn2 = delta.norm_squared();
            if dn2 == 0.0 {
                return Ok(AscentOutcome {
                    point: x,
                    iterations: it,
                    gradient_map: 0.0,
                });
            }
            match grad(&cand) {
                Ok(g_new) if -(&g_new - &g).dot(&delta) <= dn2 / t => break (cand, g_new, delta),
                _ => {
                    t *= 0.5;
                    if t < 1e-300 {
                        return Err(Error::NonConvergence {
                            what,
                            iterations: it,
                            residual: last_map,
                        });
                    }
                }
            }
        };
        last_map = delta.norm() / t;
        x = cand;
        g = g_new;
        if last_map <= tol {
            return Ok(AscentOutcome {
                point: x,
                iterations: it,
                gradient_map: last_map,
            });
        }
        t *= 2.0;
    }
    Err(Error::NonConvergence {
        what,
        iterations: max_iter,
        residual: last_map,
    })
}

fn dykstra_projector(poly: Polyhedron) -> impl Fn(&Vector) -> Result<Vector> {
    move |x| {
        let out = poly.project(x, PROJ_SWEEPS, PROJ_TOL);
        if out.residual > 1e-10 {
            Err(Error::Infeasible {
                residual: out.residual,
            })
        } else {
            Ok(out.point)
        }
    }
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub p: Vector,
    pub d: Vector,
    pub iterations: usize,
    pub gradient_map: f64,
}

pub const INNER_MAX_ITER: usize = 100_000;

/// `d*_λ = argmax_{d ∈ D(box)} H(λ, d)` by projected gradient ascent in
/// demand space, and `p*_λ = D⁻¹(d*_λ)`.
pub fn solve_inner_max(inst: &Instance, lambda: &Vector, tol: f64) -> Result<InnerSolution> {
    let start = inst.demand.mean(&inst.price_box().center());
    solve_inner_max_from(inst, lambda, &start, tol)
}

pub fn solve_inner_max_from(
    inst: &Instance,
    lambda: &Vector,
    start: &Vector,
    tol: f64,
) -> Result<InnerSolution> {
    check_dim(inst.m, lambda.len())?;
    check_dim(inst.n, start.len())?;
    let at_lambda = inst.a.transpose() * lambda;
    let out = projected_ascent(
        start.clone(),
        |d| Ok(inst.demand.phi_gradient(d)? - &at_lambda),
        dykstra_projector(inst.demand_image()),
        tol,
        INNER_MAX_ITER,
        "inner maximization",
    )?;
    Ok(InnerSolution {
        p: inst.demand.inverse(&out.point)?,
        d: out.point,
        iterations: out.iterations,
        gradient_map: out.gradient_map,
    })
}

/// `Q(λ) = max_p L(λ, p)`.
pub fn dual_q(inst: &Instance, lambda: &Vector, tol: f64) -> Result<f64> {
    let inner = solve_inner_max(inst, lambda, tol)?;
    lagrangian_h(inst, lambda, &inner.d)
}

/// `∇Q(λ) = γ − A d*_λ`.
pub fn grad_q(inst: &Instance, lambda: &Vector, tol: f64) -> Result<Vector> {
    let inner = solve_inner_max(inst, lambda, tol)?;
    Ok(&inst.gamma - &inst.a * inner.d)
}

/// `Λ = Π [0, λ_max,j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSet {
    pub lambda_max: Vec<f64>,
}

impl DualSet {
    pub fn new(lambda_max: Vec<f64>) -> Result<Self> {
        if lambda_max.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidConfig(
                "lambda_max entries must be positive".into(),
            ));
        }
        Ok(Self { lambda_max })
    }

    pub fn uniform(m: usize, hi: f64) -> Result<Self> {
        Self::new(vec![hi; m])
    }

    /// `λ_max,j = 10 · max_grid ‖∇φ‖ / σ_A` for every resource.
    pub fn crude(inst: &Instance) -> Result<Self> {
        let k = inst.default_grid(20_000);
        let mut g: f64 = 0.0;
        for p in tensor_grid(&inst.price_box(), k) {
            g = g.max(inst.demand.phi_gradient(&inst.demand.mean(&p))?.norm());
        }
        Self::uniform(inst.m, 10.0 * g / min_singular(&inst.a))
    }

    /// `λ̄ = sup_Λ ‖λ‖₂`.
    pub fn lambda_bar(&self) -> f64 {
        self.lambda_max.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn bounds(&self) -> BoxBounds {
        let hi = Vector::from_column_slice(&self.lambda_max);
        BoxBounds::new(Vector::zeros(hi.len()), hi)
    }

    pub fn project(&self, lambda: &Vector) -> Vector {
        self.bounds().project(lambda)
    }

    pub fn contains(&self, lambda: &Vector) -> bool {
        self.bounds().violation(lambda) == 0.0
    }

    pub fn center(&self) -> Vector {
        self.bounds().center()
    }
}

#[derive(Debug, Clone)]
pub struct FluidSolution {
    pub d_star: Vector,
    pub p_star: Vector,
    pub lambda_star: Vector,
    pub value: f64,
    pub dual_value: f64,
    pub binding_mask: Vec<bool>,
    pub duality_gap: f64,
    /// `max_j (⟨aⱼ, d*⟩ − γⱼ)⁺`.
    pub feasibility_residual: f64,
    /// `max_j |λ*ⱼ (γⱼ − ⟨aⱼ, d*⟩)|`.
    pub slackness_residual: f64,
    /// Gradient-mapping norm of `H(λ*, ·)` over the demand image at `d*`.
    pub stationarity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidReport {
    pub d_star: Vec<f64>,
    pub p_star: Vec<f64>,
    pub lambda_star: Vec<f64>,
    pub value: f64,
    pub dual_value: f64,
    pub binding_mask: Vec<bool>,
    pub duality_gap: f64,
    pub feasibility_residual: f64,
    pub slackness_residual: f64,
    pub stationarity_residual: f64,
}

impl FluidSolution {
    pub fn report(&self) -> FluidReport {
        let v = |x: &Vector| x.iter().cloned().collect::<Vec<_>>();
        FluidReport {
            d_star: v(&self.d_star),
            p_star: v(&self.p_star),
            lambda_star: v(&self.lambda_star),
            value: self.value,
            dual_value: self.dual_value,
            binding_mask: self.binding_mask.clone(),
            duality_gap: self.duality_gap,
            feasibility_residual: self.feasibility_residual,
            slackness_residual: self.slackness_residual,
            stationarity_residual: self.stationarity_residual,
        }
    }
}

const BINDING_TOL: f64 = 1e-7;

/// Solve the fluid problem on its primal side and minimize `Q` over the dual
/// box, then certify the pair.
pub fn solve_fluid(inst: &Instance, tol: f64) -> Result<FluidSolution> {
    let region = inst.fluid_region();
    let center = inst.demand.mean(&inst.price_box().center());
    let feas = region.find_feasible(&center, 1_000, 1e-10);
    if !feas.feasible {
        return Err(Error::Infeasible {
            residual: region.residual(&feas.point),
        });
    }
    let inner_tol = (tol * 1e-4).max(1e-12);
    let primal = projected_ascent(
        feas.point,
        |d| inst.demand.phi_gradient(d),
        dykstra_projector(region),
        inner_tol,
        INNER_MAX_ITER,
        "fluid primal ascent",
    )?;
    let d_star = primal.point;
    let p_star = inst.demand.inverse(&d_star)?;
    let value = revenue_phi(&inst.demand, &d_star)?;

    let dual_set = DualSet::crude(inst)?;
    let lambda_star = minimize_dual(inst, &dual_set, &d_star, inner_tol)?;
    let inner = solve_inner_max_from(inst, &lambda_star, &d_star, inner_tol)?;
    let dual_value = lagrangian_h(inst, &lambda_star, &inner.d)?;

    let slack = &inst.gamma - &inst.a * &d_star;
    let binding_mask = slack.iter().map(|s| *s <= BINDING_TOL).collect();
    let feasibility_residual = slack.iter().map(|s| (-s).max(0.0)).fold(0.0, f64::max);
    let slackness_residual = slack
        .iter()
        .zip(lambda_star.iter())
        .map(|(s, l)| (s * l).abs())
        .fold(0.0, f64::max);
    let stationarity_residual = stationarity(inst, &lambda_star, &d_star)?;
    Ok(FluidSolution {
        d_star,
        p_star,
        lambda_star,
        value,
        dual_value,
        binding_mask,
        duality_gap: dual_value - value,
        feasibility_residual,
        slackness_residual,
        stationarity_residual,
    })
}

fn stationarity(inst: &Instance, lambda: &Vector, d: &Vector) -> Result<f64> {
    let g = inst.demand.phi_gradient(d)? - inst.a.transpose() * lambda;
    let t = 1e-3;
    let img = inst.demand_image();
    let moved = img.project(&(d + &g * t), PROJ_SWEEPS, PROJ_TOL).point;
    Ok((moved - d).norm() / t)
}

/// Projected gradient descent on `Q` over `Λ`. The start point solves the
/// stationarity condition `∇φ(d*) = Aᵀλ` in least squares, clipped to `Λ`.
fn minimize_dual(inst: &Instance, dual_set: &DualSet, d_star: &Vector, tol: f64) -> Result<Vector> {
    let grad_phi = inst.demand.phi_gradient(d_star)?;
    let at = inst.a.transpose();
    let ls = (&inst.a * &at)
        .lu()
        .solve(&(&inst.a * &grad_phi))
        .unwrap_or_else(|| Vector::zeros(inst.m));
    let start = dual_set.project(&ls);
    let bounds = dual_set.bounds();
    let mut warm = d_star.clone();
    let out = projected_ascent(
        start,
        |lambda| {
            let inner = solve_inner_max_from(inst, lambda, &warm, tol)?;
            warm = inner.d.clone();
            Ok(&inst.a * inner.d - &inst.gamma)
        },
        |l| Ok(bounds.project(l)),
        tol,
        INNER_MAX_ITER,
        "fluid dual descent",
    )?;
    Ok(out.point)
}

/// `T · φ(d*)`, an upper bound on the expected revenue of any admissible policy.
pub fn fluid_upper_bound(inst: &Instance, sol: &FluidSolution) -> f64 {
    inst.horizon as f64 * sol.value
}

/// Convenience: `f` evaluated at the fluid price.
pub fn fluid_price_revenue(inst: &Instance, sol: &FluidSolution) -> f64 {
    revenue_f(&inst.demand, &sol.p_star)
}
