//! Euclidean projections onto boxes and halfspaces, Dykstra's algorithm for
//! projecting onto their intersection, and plain cyclic projections for
//! feasibility problems.

use crate::linalg::Vector;

/// `{x : ⟨normal, x⟩ ≤ offset}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub normal: Vector,
    pub offset: f64,
}

impl Halfspace {
    pub fn new(normal: Vector, offset: f64) -> Self {
        Self { normal, offset }
    }

    /// Positive part of `⟨normal, x⟩ − offset`.
    pub fn violation(&self, x: &Vector) -> f64 {
        (self.normal.dot(x) - self.offset).max(0.0)
    }

    pub fn project(&self, x: &Vector) -> Vector {
        let excess = self.normal.dot(x) - self.offset;
        let nn = self.normal.norm_squared();
        if excess <= 0.0 || nn == 0.0 {
            x.clone()
        } else {
            x - &self.normal * (excess / nn)
        }
    }
}

/// Axis-aligned box `lo ≤ x ≤ hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lo: Vector,
    pub hi: Vector,
}

impl BoxBounds {
    pub fn new(lo: Vector, hi: Vector) -> Self {
        debug_assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        Self::new(Vector::from_element(dim, lo), Vector::from_element(dim, hi))
    }

    pub fn project(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .map(|(v, (l, h))| v.clamp(*l, *h)),
        )
    }

    pub fn violation(&self, x: &Vector) -> f64 {
        x.iter()
            .zip(self.lo.iter().zip(self.hi.iter()))
            .map(|(v, (l, h))| (l - v).max(v - h).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn center(&self) -> Vector {
        (&self.lo + &self.hi) * 0.5
    }

    pub fn intersect(&self, other: &BoxBounds) -> BoxBounds {
        BoxBounds::new(self.lo.sup(&other.lo), self.hi.inf(&other.hi))
    }

    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(self.hi.iter()).any(|(l, h)| l > h)
    }
}

/// Convex set given by an optional box and a list of halfspaces.
#[derive(Debug, Clone, Default)]
pub struct Polyhedron {
    pub bounds: Option<BoxBounds>,
    pub halfspaces: Vec<Halfspace>,
}

impl Polyhedron {
    pub fn new(bounds: Option<BoxBounds>, halfspaces: Vec<Halfspace>) -> Self {
        Self { bounds, halfspaces }
    }

    /// Largest constraint violation at `x`.
    pub fn residual(&self, x: &Vector) -> f64 {
        let b = self.bounds.as_ref().map_or(0.0, |b| b.violation(x));
        self.halfspaces
            .iter()
            .map(|h| h.violation(x))
            .fold(b, f64::max)
    }

    fn project_piece(&self, piece: usize, x: &Vector) -> Vector {
        match (&self.bounds, piece) {
            (Some(b), 0) => b.project(x),
            (Some(_), k) => self.halfspaces[k - 1].project(x),
            (None, k) => self.halfspaces[k].project(x),
        }
    }

    fn pieces(&self) -> usize {
        self.halfspaces.len() + usize::from(self.bounds.is_some())
    }

    /// Euclidean projection by Dykstra's algorithm.
    pub fn project(&self, x: &Vector, max_sweeps: usize, tol: f64) -> ProjectionOutcome {
        if self.residual(x) <= tol {
            return ProjectionOutcome {
                point: x.clone(),
                residual: self.residual(x),
                sweeps: 0,
                converged: true,
            };
        }
        let k = self.pieces();
        let mut y = x.clone();
        let mut corrections = vec![Vector::zeros(x.len()); k];
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < max_sweeps {
            sweeps += 1;
            let start = y.clone();
            let mut moved: f64 = 0.0;
            for (i, corr) in corrections.iter_mut().enumerate() {
                let shifted = &y + &*corr;
                let next = self.project_piece(i, &shifted);
                let new_corr = shifted - &next;
                moved = moved.max((&new_corr - &*corr).amax());
                *corr = new_corr;
                y = next;
            }
            let moved = moved.max((&y - &start).amax());
            if moved <= tol && self.residual(&y) <= tol {
                converged = true;
                break;
            }
        }
        ProjectionOutcome {
            residual: self.residual(&y),
            point: y,
            sweeps,
            converged,
        }
    }

    /// Cyclic projections (POCS) from `x` until every constraint holds within
    /// `tol`. The box is projected last in each sweep so that a returned point
    /// satisfies it exactly.
    pub fn find_feasible(&self, x: &Vector, max_sweeps: usize, tol: f64) -> FeasibilityOutcome {
        let mut y = x.clone();
        if self.residual(&y) <= tol {
            return FeasibilityOutcome {
                point: y,
                feasible: true,
                sweeps: 0,
            };
        }
        for sweep in 1..=max_sweeps {
            for h in &self.halfspaces {
                y = h.project(&y);
            }
            if let Some(b) = &self.bounds {
                y = b.project(&y);
            }
            if self.residual(&y) <= tol {
                return FeasibilityOutcome {
                    point: y,
                    feasible: true,
                    sweeps: sweep,
                };
            }
        }
        FeasibilityOutcome {
            point: y,
            feasible: false,
            sweeps: max_sweeps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionOutcome {
    pub point: Vector,
    pub residual: f64,
    pub sweeps: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FeasibilityOutcome {
    pub point: Vector,
    pub feasible: bool,
    pub sweeps: usize,
}
