//! Projected Newton method for smooth convex programs over the nonnegative
//! orthant. Both the bandwidth allocator and the lifting map reduce to such a
//! program in their dual (link price) variables.

use nalgebra::{DMatrix, DVector};

/// A convex objective in nonnegative variables.
pub(crate) trait OrthantProblem {
    fn dim(&self) -> usize;
    /// Objective value, or `None` outside the domain.
    fn value(&self, p: &[f64]) -> Option<f64>;
    /// Gradient and Hessian at a point of the domain.
    fn derivatives(&self, p: &[f64]) -> (Vec<f64>, DMatrix<f64>);
    /// Problem-specific optimality residual; the solver stops once it is
    /// at most the requested tolerance.
    fn residual(&self, p: &[f64]) -> f64;
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub point: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

fn project(p: &mut [f64]) {
    for x in p.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Distance from `p` to its projected-gradient image; zero at a KKT point.
fn pg_norm(p: &[f64], g: &[f64]) -> f64 {
    p.iter()
        .zip(g)
        .map(|(&x, &d)| (x - (x - d).max(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Solves `h x = rhs` after scaling `h` to unit diagonal. Diagonal entries
/// can differ by twenty orders of magnitude when a price approaches zero, so
/// regularizing the unscaled matrix would drown the small ones.
fn solve_regularized(h: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = h.nrows();
    let d: Vec<f64> = (0..n).map(|k| h[(k, k)].abs().max(1e-300).sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |a, b| h[(a, b)] / (d[a] * d[b]));
    let scaled_rhs = DVector::from_fn(n, |a, _| rhs[a] / d[a]);
    let mut reg = 1e-13;
    loop {
        let mut m = scaled.clone();
        for k in 0..n {
            m[(k, k)] += reg;
        }
        if let Some(ch) = m.cholesky() {
            let z = ch.solve(&scaled_rhs);
            return DVector::from_fn(n, |a, _| z[a] / d[a]);
        }
        reg *= 100.0;
    }
}

/// Minimizes `problem` over `p ≥ 0` starting from `start`, which must lie in
/// the domain.
pub(crate) fn minimize<P: OrthantProblem>(
    problem: &P,
    start: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Outcome {
    let dim = problem.dim();
    let mut p = start;
    project(&mut p);
    let mut f = problem
        .value(&p)
        .expect("starting point must lie in the objective's domain");
    let mut residual = problem.residual(&p);
    let mut iterations = 0;

    while residual > tol && iterations < max_iter {
        iterations += 1;
        let (g, h) = problem.derivatives(&p);
        let eps = pg_norm(&p, &g).min(1e-3);

        let active: Vec<bool> = (0..dim).map(|j| p[j] <= eps && g[j] > 0.0).collect();
        let free: Vec<usize> = (0..dim).filter(|&j| !active[j]).collect();

        let mut dir = vec![0.0; dim];
        if !free.is_empty() {
            let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let rhs = DVector::from_iterator(free.len(), free.iter().map(|&j| -g[j]));
            let d = solve_regularized(&hff, &rhs);
            for (a, &j) in free.iter().enumerate() {
                dir[j] = d[a];
            }
        }
        for j in (0..dim).filter(|&j| active[j]) {
            dir[j] = -g[j] / h[(j, j)].max(1e-12);
        }

        match line_search(problem, &p, f, &g, &dir) {
            Some((q, fq)) => {
                p = q;
                f = fq;
            }
            None => {
                // Newton direction failed; fall back to a scaled gradient step.
                let grad_dir: Vec<f64> = (0..dim).map(|j| -g[j] / h[(j, j)].max(1e-12)).collect();
                match line_search(problem, &p, f, &g, &grad_dir) {
                    Some((q, fq)) => {
                        p = q;
                        f = fq;
                    }
                    None => {
                        // Stalled at rounding level: accept the full Newton
                        // step if it lowers the residual, otherwise give up.
                        let mut q: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a + b).collect();
                        project(&mut q);
                        match problem.value(&q) {
                            Some(fq) if problem.residual(&q) < residual => {
                                p = q;
                                f = fq;
                            }
                            _ => break,
                        }
                    }
                }
            }
        }
        residual = problem.residual(&p);
    }
    Outcome { point: p, residual, iterations }
}

/// Armijo backtracking along the projection arc `[p + s d]⁺`.
fn line_search<P: OrthantProblem>(
    problem: &P,
    p: &[f64],
    f: f64,
    g: &[f64],
    dir: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let noise = 1e-15 * (1.0 + f.abs());
    let mut s = 1.0;
    for _ in 0..MAX_HALVINGS {
        let mut q: Vec<f64> = p.iter().zip(dir).map(|(a, d)| a + s * d).collect();
        project(&mut q);
        // First-order decrease predicted along the arc.
        let predicted: f64 = (0..p.len()).map(|j| g[j] * (p[j] - q[j])).sum();
        if predicted <= 0.0 {
            return None;
        }
        if let Some(fq) = problem.value(&q) {
            if fq <= f - ARMIJO * predicted + noise {
                return Some((q, fq));
            }
        }
        s *= 0.5;
    }
    None
}
