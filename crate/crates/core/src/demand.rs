//! Demand curves, revenue functions and the purchase sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{fd_hessian, min_singular, op_norm, sym_eigenvalues, Matrix, Vector};
use crate::projection::{BoxBounds, Halfspace, Polyhedron};

/// A smooth, invertible mean-demand map `D: [p̲, p̄]ᴺ → ℝᴺ`.
pub trait DemandModel: Send + Sync {
    fn dim(&self) -> usize;

    fn mean(&self, p: &Vector) -> Vector;

    /// `J[i][j] = ∂Dᵢ/∂pⱼ`.
    fn jacobian(&self, p: &Vector) -> Matrix;

    fn inverse(&self, d: &Vector) -> Result<Vector>;

    /// Exact description of `D(box)` as a polyhedron in demand space.
    fn image(&self, bounds: &BoxBounds) -> Polyhedron;

    fn try_mean(&self, p: &Vector) -> Result<Vector> {
        check_dim(self.dim(), p.len())?;
        Ok(self.mean(p))
    }

    /// `∇φ(d) = p + J_D(p)⁻ᵀ d` with `p = D⁻¹(d)`.
    fn phi_gradient(&self, d: &Vector) -> Result<Vector> {
        let p = self.inverse(d)?;
        let jt = self.jacobian(&p).transpose();
        let x = jt
            .lu()
            .solve(d)
            .ok_or_else(|| Error::Domain(d.iter().cloned().collect()))?;
        Ok(p + x)
    }

    fn phi_hessian(&self, d: &Vector) -> Result<Matrix> {
        self.inverse(d)?;
        Ok(fd_hessian(
            |x| revenue_phi(self, x).unwrap_or(f64::NAN),
            d,
            1e-4,
        ))
    }
}

/// Multinomial logit: `Dᵢ = exp(aᵢ − bᵢpᵢ) / (1 + Σⱼ exp(aⱼ − bⱼpⱼ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitDemand {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LogitDemand {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        check_dim(a.len(), b.len())?;
        if a.is_empty() {
            return Err(Error::InvalidInstance("logit model needs N ≥ 1".into()));
        }
        if b.iter().any(|&x| !(x > 0.0) || !x.is_finite()) || a.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInstance(
                "logit slopes must be positive and finite".into(),
            ));
        }
        Ok(Self { a, b })
    }

    fn weights(&self, p: &Vector) -> Vector {
        Vector::from_iterator(
            p.len(),
            (0..p.len()).map(|i| (self.a[i] - self.b[i] * p[i]).exp()),
        )
    }
}

impl DemandModel for LogitDemand {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn mean(&self, p: &Vector) -> Vector {
        let w = self.weights(p);
        let z = 1.0 + w.sum();
        w / z
    }

    fn jacobian(&self, p: &Vector) -> Matrix {
        let d = self.mean(p);
        let n = d.len();
        Matrix::from_fn(n, n, |i, j| {
            if i == j {
                -self.b[i] * d[i] * (1.0 - d[i])
            } else {
                self.b[j] * d[i] * d[j]
            }
        })
    }

    fn inverse(&self, d: &Vector) -> Result<Vector> {
        check_dim(self.dim(), d.len())?;
        let d0 = 1.0 - d.sum();
        if d.iter().any(|&x| !(x > 0.0)) || !(d0 > 0.0) {
            return Err(Error::Domain(d.iter().cloned().collect()));
        }
        Ok(Vector::from_iterator(
            d.len(),
            (0..d.len()).map(|i| (self.a[i] - (d[i] / d0).ln()) / self.b[i]),
        ))
    }

    fn image(&self, bounds: &BoxBounds) -> Polyhedron {
        // dᵢ/d₀ = exp(aᵢ − bᵢpᵢ) ranges over [ℓᵢ, uᵢ] independently per coordinate.
        let n = self.dim();
        let mut hs = Vec::with_capacity(2 * n);
        for i in 0..n {
            let lo = (self.a[i] - self.b[i] * bounds.hi[i]).exp();
            let hi = (self.a[i] - self.b[i] * bounds.lo[i]).exp();
            let mut up = Vector::from_element(n, hi);
            up[i] += 1.0;
            hs.push(Halfspace::new(up, hi));
            let mut down = Vector::from_element(n, -lo);
            down[i] -= 1.0;
            hs.push(Halfspace::new(down, -lo));
        }
        Polyhedron::new(None, hs)
    }

    fn phi_gradient(&self, d: &Vector) -> Result<Vector> {
        let p = self.inverse(d)?;
        let d0 = 1.0 - d.sum();
        let s: f64 = (0..d.len()).map(|i| d[i] / self.b[i]).sum();
        Ok(Vector::from_iterator(
            d.len(),
            (0..d.len()).map(|k| p[k] - 1.0 / self.b[k] - s / d0),
        ))
    }

    fn phi_hessian(&self, d: &Vector) -> Result<Matrix> {
        self.inverse(d)?;
        let n = d.len();
        let d0 = 1.0 - d.sum();
        let s: f64 = (0..n).map(|i| d[i] / self.b[i]).sum();
        Ok(Matrix::from_fn(n, n, |k, l| {
            let diag = if k == l {
                -1.0 / (self.b[k] * d[k])
            } else {
                0.0
            };
            diag - 1.0 / (self.b[k] * d0) - 1.0 / (self.b[l] * d0) - s / (d0 * d0)
        }))
    }
}

/// Linear demand `D(p) = a − Bp` with `B` positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDemand {
    pub a: Vector,
    pub b: Matrix,
    b_inv: Matrix,
}

impl LinearDemand {
    pub fn new(a: Vector, b: Matrix) -> Result<Self> {
        check_dim(a.len(), b.nrows())?;
        check_dim(a.len(), b.ncols())?;
        if sym_eigenvalues(&b).first().map_or(true, |&e| e <= 0.0) {
            return Err(Error::InvalidInstance(
                "linear demand slope matrix must be positive definite".into(),
            ));
        }
        let b_inv = b
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidInstance("singular slope matrix".into()))?;
        Ok(Self { a, b, b_inv })
    }
}

impl DemandModel for LinearDemand {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn mean(&self, p: &Vector) -> Vector {
        &self.a - &self.b * p
    }

    fn jacobian(&self, _p: &Vector) -> Matrix {
        -&self.b
    }

    fn inverse(&self, d: &Vector) -> Result<Vector> {
        check_dim(self.dim(), d.len())?;
        Ok(&self.b_inv * (&self.a - d))
    }

    fn image(&self, bounds: &BoxBounds) -> Polyhedron {
        // lo ≤ B⁻¹(a − d) ≤ hi, one pair of halfspaces per row of B⁻¹.
        let n = self.dim();
        let mut hs = Vec::with_capacity(2 * n);
        for r in 0..n {
            let c: Vector = self.b_inv.row(r).transpose();
            let ca = c.dot(&self.a);
            hs.push(Halfspace::new(-&c, bounds.hi[r] - ca));
            hs.push(Halfspace::new(c, ca - bounds.lo[r]));
        }
        Polyhedron::new(None, hs)
    }

    fn phi_hessian(&self, d: &Vector) -> Result<Matrix> {
        check_dim(self.dim(), d.len())?;
        Ok(-(&self.b_inv + self.b_inv.transpose()))
    }
}

/// Serializable demand specification, `{"type": "logit", "a": [...], "b": [...]}`
/// or `{"type": "linear", "a": [...], "B": [row-major]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DemandSpec {
    Logit {
        a: Vec<f64>,
        b: Vec<f64>,
    },
    Linear {
        a: Vec<f64>,
        #[serde(rename = "B")]
        b: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DemandCurve {
    Logit(LogitDemand),
    Linear(LinearDemand),
}

impl DemandCurve {
    pub fn logit(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        Ok(Self::Logit(LogitDemand::new(a, b)?))
    }

    pub fn linear(a: Vector, b: Matrix) -> Result<Self> {
        Ok(Self::Linear(LinearDemand::new(a, b)?))
    }

    pub fn from_spec(spec: &DemandSpec) -> Result<Self> {
        match spec {
            DemandSpec::Logit { a, b } => Self::logit(a.clone(), b.clone()),
            DemandSpec::Linear { a, b } => {
                let n = a.len();
                if b.len() != n * n {
                    return Err(Error::Dimension {
                        expected: n * n,
                        got: b.len(),
                    });
                }
                Self::linear(
                    Vector::from_column_slice(a),
                    Matrix::from_row_slice(n, n, b),
                )
            }
        }
    }

    pub fn spec(&self) -> DemandSpec {
        match self {
            Self::Logit(m) => DemandSpec::Logit {
                a: m.a.clone(),
                b: m.b.clone(),
            },
            Self::Linear(m) => DemandSpec::Linear {
                a: m.a.iter().cloned().collect(),
                b: m.b.transpose().iter().cloned().collect(),
            },
        }
    }

    fn inner(&self) -> &dyn DemandModel {
        match self {
            Self::Logit(m) => m,
            Self::Linear(m) => m,
        }
    }
}

impl DemandModel for DemandCurve {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn mean(&self, p: &Vector) -> Vector {
        self.inner().mean(p)
    }
    fn jacobian(&self, p: &Vector) -> Matrix {
        self.inner().jacobian(p)
    }
    fn inverse(&self, d: &Vector) -> Result<Vector> {
        self.inner().inverse(d)
    }
    fn image(&self, bounds: &BoxBounds) -> Polyhedron {
        self.inner().image(bounds)
    }
    fn phi_gradient(&self, d: &Vector) -> Result<Vector> {
        self.inner().phi_gradient(d)
    }
    fn phi_hessian(&self, d: &Vector) -> Result<Matrix> {
        self.inner().phi_hessian(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// At most one unit sold per period, product `i` with probability `Dᵢ(p)`.
    #[default]
    Multinomial,
    /// Realized demand equals the mean.
    None,
}

/// Draw realized demand given its mean. Multinomial mode uses a single
/// uniform draw against the cumulative probabilities.
pub fn sample_from_mean<R: Rng + ?Sized>(mean: &Vector, rng: &mut R, noise: NoiseMode) -> Vector {
    match noise {
        NoiseMode::None => mean.clone(),
        NoiseMode::Multinomial => {
            let u: f64 = rng.gen();
            let mut y = Vector::zeros(mean.len());
            let mut acc = 0.0;
            for (i, &di) in mean.iter().enumerate() {
                acc += di;
                if u < acc {
                    y[i] = 1.0;
                    break;
                }
            }
            y
        }
    }
}

/// `None` price means shutoff, which always yields zero demand.
pub fn sample_demand<M: DemandModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    p: Option<&Vector>,
    rng: &mut R,
    noise: NoiseMode,
) -> Vector {
    match p {
        None => Vector::zeros(model.dim()),
        Some(p) => sample_from_mean(&model.mean(p), rng, noise),
    }
}

/// `f(p) = ⟨p, D(p)⟩`.
pub fn revenue_f<M: DemandModel + ?Sized>(model: &M, p: &Vector) -> f64 {
    p.dot(&model.mean(p))
}

/// `∇f(p) = D(p) + J_D(p)ᵀ p`.
pub fn revenue_gradient<M: DemandModel + ?Sized>(model: &M, p: &Vector) -> Vector {
    model.mean(p) + model.jacobian(p).transpose() * p
}

/// `φ(d) = ⟨d, D⁻¹(d)⟩`.
pub fn revenue_phi<M: DemandModel + ?Sized>(model: &M, d: &Vector) -> Result<f64> {
    Ok(d.dot(&model.inverse(d)?))
}

/// Grid estimates of the regularity constants. `d_bar` bounds realized
/// demand per coordinate; `b_j` is a separate bound on the Jacobian used by
/// the theory step size and defaults to `b_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityConstants {
    pub b_d: f64,
    pub sigma_d: f64,
    pub l_d: f64,
    pub b_f: f64,
    pub b_phi: f64,
    pub sigma_phi: f64,
    pub b_a: f64,
    pub sigma_a: f64,
    pub b_r: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub d_bar: f64,
    pub b_j: f64,
}

impl RegularityConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.b_d,
            self.sigma_d,
            self.b_f,
            self.b_phi,
            self.sigma_phi,
            self.b_a,
            self.sigma_a,
            self.b_r,
            self.gamma_min,
            self.gamma_max,
            self.d_bar,
            self.b_j,
        ];
        if all.iter().any(|x| !(*x > 0.0) || !x.is_finite()) || !(self.l_d >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "regularity constants must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Enumerate a uniform tensor grid with `k` points per axis.
pub(crate) fn tensor_grid(bounds: &BoxBounds, k: usize) -> Vec<Vector> {
    let n = bounds.lo.len();
    let total = k.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = Vector::zeros(n);
            for i in 0..n {
                let t = (idx % k) as f64 / (k - 1) as f64;
                idx /= k;
                p[i] = bounds.lo[i] + t * (bounds.hi[i] - bounds.lo[i]);
            }
            p
        })
        .collect()
}

/// Scan a price grid for `B_D, σ_D, L_D, B_f`, the image of the grid for
/// `B_φ, σ_φ`, and the SVD of `A` for `B_A, σ_A`.
pub fn estimate_regularity<M: DemandModel + ?Sized>(
    model: &M,
    a: &Matrix,
    gamma: &Vector,
    bounds: &BoxBounds,
    noise: NoiseMode,
    grid_points: usize,
) -> Result<RegularityConstants> {
    let n = model.dim();
    if grid_points < 2 {
        return Err(Error::DegenerateGrid(format!(
            "need at least 2 points per axis, got {grid_points}"
        )));
    }
    if bounds
        .lo
        .iter()
        .zip(bounds.hi.iter())
        .any(|(l, h)| !(h > l))
    {
        return Err(Error::DegenerateGrid("price box has empty interior".into()));
    }
    if (grid_points as f64).powi(n as i32) > 2e6 {
        return Err(Error::DegenerateGrid(format!(
            "{grid_points}^{n} grid points is too many"
        )));
    }
    let grid = tensor_grid(bounds, grid_points);
    let jacs: Vec<Matrix> = grid.iter().map(|p| model.jacobian(p)).collect();

    let mut b_d: f64 = 0.0;
    let mut sigma_d = f64::INFINITY;
    for j in &jacs {
        b_d = b_d.max(op_norm(j));
        sigma_d = sigma_d.min(min_singular(j));
    }

    let mut l_d: f64 = 0.0;
    let mut stride = 1;
    for _axis in 0..n {
        for (idx, j) in jacs.iter().enumerate() {
            if (idx / stride) % grid_points + 1 < grid_points {
                let other = idx + stride;
                let dist = (&grid[other] - &grid[idx]).norm();
                l_d = l_d.max(op_norm(&(&jacs[other] - j)) / dist);
            }
        }
        stride *= grid_points;
    }

    let mut b_f: f64 = 0.0;
    let mut b_phi: f64 = 0.0;
    let mut sigma_phi = f64::INFINITY;
    let mut d_max: f64 = 0.0;
    let mut f_max: f64 = 0.0;
    for p in &grid {
        let grad = revenue_gradient(model, p);
        let hf = fd_hessian(|x| revenue_f(model, x), p, 1e-4);
        b_f = b_f.max(grad.norm()).max(op_norm(&hf));
        let d = model.mean(p);
        d_max = d_max.max(d.amax());
        f_max = f_max.max(p.dot(&d));
        let g_phi = model.phi_gradient(&d)?;
        let h_phi = model.phi_hessian(&d)?;
        let ev = sym_eigenvalues(&h_phi);
        b_phi = b_phi.max(g_phi.norm()).max(op_norm(&h_phi));
        sigma_phi = sigma_phi.min(-ev[ev.len() - 1]);
    }

    let (d_bar, b_r) = match noise {
        NoiseMode::Multinomial => (1.0, bounds.hi.amax()),
        NoiseMode::None => (d_max, f_max),
    };
    let consts = RegularityConstants {
        b_d,
        sigma_d,
        l_d,
        b_f,
        b_phi,
        sigma_phi,
        b_a: op_norm(a),
        sigma_a: min_singular(a),
        b_r,
        gamma_min: gamma.min(),
        gamma_max: gamma.max(),
        d_bar,
        b_j: b_d,
    };
    if !(consts.sigma_phi > 0.0) || !(consts.sigma_d > 0.0) {
        return Err(Error::InvalidInstance(format!(
            "demand model is not regular on the box (σ_D = {}, σ_φ = {})",
            consts.sigma_d, consts.sigma_phi
        )));
    }
    Ok(consts)
}
