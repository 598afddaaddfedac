//! Nearest point of a convex hull, `min_{λ ∈ Δ_m} ‖target − Σ λ_i p_i‖`.
//!
//! Wolfe's minimum-norm-point active-set method on the translated points
//! `q_i = p_i − target`. Each major iteration adds the vertex most aligned
//! against the current point; minor iterations solve the affine minimiser
//! of the active set and step back to the simplex when weights go negative.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop when no vertex improves the current point by more than this
    /// cosine between `x` and `x − q_j`.
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplexSolution {
    pub lambda: Vec<f64>,
    pub projected_point: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn project_to_hull(target: &[f64], points: &[Vec<f64>]) -> Result<SimplexSolution> {
    project_to_hull_with(target, points, SolverOptions::default())
}

pub fn project_to_hull_with(
    target: &[f64],
    points: &[Vec<f64>],
    opts: SolverOptions,
) -> Result<SimplexSolution> {
    if points.is_empty() {
        return Err(Error::InvalidInput("hull projection needs at least one point".into()));
    }
    let d = target.len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Mismatch("hull points and target differ in dimension".into()));
    }
    if !linalg::all_finite(target) || points.iter().any(|p| !linalg::all_finite(p)) {
        return Err(Error::InvalidInput("non-finite hull projection input".into()));
    }
    let m = points.len();
    if points.iter().all(|p| p == &points[0]) {
        return Ok(finish(target, points, vec![1.0 / m as f64; m], 0, true));
    }
    let q: Vec<Vec<f64>> = points.iter().map(|p| linalg::sub(p, target)).collect();
    let (lambda, iterations, converged) = wolfe(&q, opts);
    Ok(finish(target, points, lambda, iterations, converged))
}

fn finish(
    target: &[f64],
    points: &[Vec<f64>],
    mut lambda: Vec<f64>,
    iterations: usize,
    converged: bool,
) -> SimplexSolution {
    lambda.iter_mut().for_each(|l| *l = l.max(0.0));
    let total: f64 = lambda.iter().sum();
    lambda.iter_mut().for_each(|l| *l /= total);
    let projected_point = linalg::combine(&lambda, points);
    let residual = linalg::dist(target, &projected_point);
    SimplexSolution {
        lambda,
        projected_point,
        residual,
        iterations,
        converged,
    }
}

/// Lowest-index argmin of `key` over `0..n`.
fn argmin(n: usize, key: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_val = key(0);
    for i in 1..n {
        let v = key(i);
        if v < best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Weights `μ` (summing to one) of the minimum-norm point of the affine
/// hull of `q[active]`. Solved as least squares in the edge directions
/// `q_i − q_0`, with a pseudo-inverse for rank-deficient active sets.
fn affine_minimizer(q: &[Vec<f64>], active: &[usize]) -> Vec<f64> {
    let k = active.len();
    if k == 1 {
        return vec![1.0];
    }
    let base = &q[active[0]];
    let d = base.len();
    let edges = DMatrix::from_fn(d, k - 1, |r, c| q[active[c + 1]][r] - base[r]);
    let rhs = DVector::from_fn(d, |r, _| -base[r]);
    let svd = edges.svd(true, true);
    let tol = 1e-13 * svd.singular_values.max();
    let mu = svd.solve(&rhs, tol).expect("SVD computed with both factors");
    let mut out = Vec::with_capacity(k);
    out.push(1.0 - mu.iter().sum::<f64>());
    out.extend(mu.iter());
    out
}

fn wolfe(q: &[Vec<f64>], opts: SolverOptions) -> (Vec<f64>, usize, bool) {
    let m = q.len();
    let norms: Vec<f64> = q.iter().map(|p| linalg::dot(p, p)).collect();
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let start = argmin(m, |i| norms[i]);
    let mut active = vec![start];
    let mut weights = vec![1.0];
    let mut x = q[start].clone();
    let mut iterations = 0;

    let current = |active: &[usize], weights: &[f64]| {
        let pts: Vec<Vec<f64>> = active.iter().map(|&i| q[i].clone()).collect();
        linalg::combine(weights, &pts)
    };
    let dense = |active: &[usize], weights: &[f64]| {
        let mut l = vec![0.0; m];
        for (&i, &w) in active.iter().zip(weights) {
            l[i] = w;
        }
        l
    };

    while iterations < opts.max_iter {
        iterations += 1;
        let xx = linalg::dot(&x, &x);
        if xx <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            return (dense(&active, &weights), iterations, true);
        }
        let j = argmin(m, |i| linalg::dot(&x, &q[i]));
        let gap = xx - linalg::dot(&x, &q[j]);
        let spread = linalg::dist(&x, &q[j]);
        if gap <= opts.tol * xx.sqrt() * spread || active.contains(&j) {
            return (dense(&active, &weights), iterations, true);
        }
        active.push(j);
        weights.push(0.0);

        loop {
            let mu = affine_minimizer(q, &active);
            if mu.iter().all(|&u| u > 1e-14) {
                weights = mu;
                break;
            }
            let mut theta = 1.0;
            for (w, u) in weights.iter().zip(&mu) {
                if *u <= 1e-14 {
                    let denom = w - u;
                    if denom > 0.0 {
                        theta = f64::min(theta, w / denom);
                    }
                }
            }
            for (w, u) in weights.iter_mut().zip(&mu) {
                *w += theta * (u - *w);
            }
            let mut k = 0;
            while k < active.len() {
                if weights[k] <= 1e-14 {
                    active.remove(k);
                    weights.remove(k);
                } else {
                    k += 1;
                }
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            if active.len() == 1 {
                weights = vec![1.0];
                break;
            }
        }
        x = current(&active, &weights);
    }
    (dense(&active, &weights), iterations, false)
}
