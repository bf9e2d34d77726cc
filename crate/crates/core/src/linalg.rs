//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Largest singular value.
pub fn op_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Smallest singular value among the first `min(rows, cols)` ones.
pub fn min_singular(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let s = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = s.symmetric_eigen().eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn max_abs(v: &Vector) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Central-difference Jacobian of `f: R^n -> R^m` at `x`.
pub fn fd_jacobian<F>(f: F, x: &Vector, h: f64) -> Matrix
where
    F: Fn(&Vector) -> Vector,
{
    let n = x.len();
    let m = f(x).len();
    let mut jac = Matrix::zeros(m, n);
    for k in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(k, &col);
    }
    jac
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &Vector, h: f64) -> Vector
where
    F: Fn(&Vector) -> f64,
{
    let mut g = Vector::zeros(x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        g[k] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Second-order central-difference Hessian of a scalar function, symmetrized.
pub fn fd_hessian<F>(f: F, x: &Vector, h: f64) -> Matrix
where
    F: Fn(&Vector) -> f64,
{
    let n = x.len();
    let mut hess = Matrix::zeros(n, n);
    let f0 = f(x);
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - 2.0 * f0 + f(&xm)) / (h * h)
            } else {
                let shifted = |si: f64, sj: f64| {
                    let mut y = x.clone();
                    y[i] += si * h;
                    y[j] += sj * h;
                    f(&y)
                };
                (shifted(1.0, 1.0) - shifted(1.0, -1.0) - shifted(-1.0, 1.0) + shifted(-1.0, -1.0))
                    / (4.0 * h * h)
            };
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Pairwise summation in slice order; the result depends only on the order of `xs`.
pub fn stable_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    stable_sum(&xs[..mid]) + stable_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_values_of_consumption_matrix() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 2.0]);
        // AAᵀ = [[2,2],[2,4]] has eigenvalues 3 ± √5.
        let hi = (3.0 + 5f64.sqrt()).sqrt();
        let lo = (3.0 - 5f64.sqrt()).sqrt();
        assert!((op_norm(&a) - hi).abs() < 1e-12);
        assert!((min_singular(&a) - lo).abs() < 1e-12);
        assert!((hi - 2.2882).abs() < 1e-4 && (lo - 0.87403).abs() < 1e-5);
    }

    #[test]
    fn fd_hessian_of_quadratic_is_exact() {
        let q = |x: &Vector| x[0] * x[0] + 3.0 * x[0] * x[1] - 2.0 * x[1] * x[1];
        let h = fd_hessian(q, &Vector::from_vec(vec![0.3, -0.7]), 1e-3);
        assert!((h[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((h[(0, 1)] - 3.0).abs() < 1e-6);
        assert!((h[(1, 1)] + 4.0).abs() < 1e-6);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.5).collect();
        assert_eq!(stable_sum(&xs), 2475.0);
    }
}
