//! Fluid model: workload, the lifting map onto the invariant manifold, and
//! an Euler integrator for fluid model solutions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::allocator::{allocate_real, SOLVER_TOL};
use crate::convex::{self, OrthantProblem};
use crate::error::{Error, Result};
use crate::lyapunov::{f_alpha, lyapunov_weights};
use crate::model::{criticality_defect, NetworkSpec};

/// Coordinates at or below this are on the boundary.
const BOUNDARY: f64 = 1e-9;
/// Largest change of `‖n‖∞` allowed in one Euler sub-step, relative to
/// `‖n‖∞`. Keeps the integrator resolving states much smaller than the
/// nominal step, where routes leave and rejoin the boundary.
const SUBSTEP_FRACTION: f64 = 0.01;
/// Largest relative criticality defect accepted as `Aρ = C`.
pub const CRITICALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct FluidTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub lyapunov_values: Vec<f64>,
}

/// `A M⁻¹ n`: per-link outstanding work.
pub fn workload(spec: &NetworkSpec, n: &[f64]) -> Vec<f64> {
    let scaled: Vec<f64> = n.iter().zip(spec.service_rates()).map(|(x, m)| x / m).collect();
    spec.link_totals(&scaled)
}

/// Dual of `min F(n) s.t. A M⁻¹ n ≥ w, n ≥ 0` in the link multipliers `q`.
/// For given `q` the minimizing counts are `n_i = (s_i / c_i)^{1/α}` with
/// `s = M⁻¹ Aᵀ q` and `c` the Lyapunov weights.
struct LiftDual<'a> {
    spec: &'a NetworkSpec,
    target: Vec<f64>,
    weights: Vec<f64>,
}

impl LiftDual<'_> {
    fn signal(&self, q: &[f64]) -> Vec<f64> {
        let y = self.spec.route_totals(q);
        y.iter().zip(self.spec.service_rates()).map(|(y, m)| y / m).collect()
    }

    fn counts(&self, q: &[f64]) -> Vec<f64> {
        let inv = 1.0 / self.spec.alpha();
        self.signal(q).iter().zip(&self.weights).map(|(s, c)| (s / c).max(0.0).powf(inv)).collect()
    }
}

impl OrthantProblem for LiftDual<'_> {
    fn dim(&self) -> usize {
        self.spec.num_links()
    }

    fn value(&self, q: &[f64]) -> Option<f64> {
        let a = self.spec.alpha();
        let n = self.counts(q);
        let primal: f64 = n.iter().zip(&self.weights).map(|(x, c)| c * x.powf(a + 1.0)).sum::<f64>() * a / (a + 1.0);
        let linear: f64 = q.iter().zip(&self.target).map(|(q, w)| q * w).sum();
        let v = primal - linear;
        v.is_finite().then_some(v)
    }

    fn derivatives(&self, q: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let links = self.dim();
        let a = self.spec.alpha();
        let n = self.counts(q);
        let s = self.signal(q);
        let load = workload(self.spec, &n);
        let grad: Vec<f64> = load.iter().zip(&self.target).map(|(l, w)| l - w).collect();
        let mut hess = DMatrix::zeros(links, links);
        for i in 0..n.len() {
            let m = self.spec.service_rates()[i];
            // dn_i/ds_i = n_i / (α s_i), unbounded at s_i = 0 when α > 1.
            let dn = if s[i] > 0.0 { n[i] / (a * s[i]) } else if a < 1.0 { 0.0 } else { 1e12 };
            let curv = dn.min(1e12) / (m * m);
            for &j in self.spec.route_links(i) {
                for &k in self.spec.route_links(i) {
                    hess[(j, k)] += curv;
                }
            }
        }
        (grad, hess)
    }

    fn residual(&self, q: &[f64]) -> f64 {
        let load = workload(self.spec, &self.counts(q));
        let mut slack_violation: f64 = 0.0;
        let mut infeasibility: f64 = 0.0;
        for j in 0..q.len() {
            let slack = load[j] - self.target[j];
            slack_violation = slack_violation.max((q[j] * slack).abs());
            infeasibility = infeasibility.max(-slack);
        }
        slack_violation + infeasibility
    }
}

/// The lifting map: the flow vector minimizing `F` among those carrying at
/// least workload `w` on every link.
pub fn lift(spec: &NetworkSpec, w: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(w.len(), spec.num_links(), "workload length must match link count");
    let scale = w.iter().cloned().fold(0.0, f64::max);
    if scale <= 0.0 {
        return Ok(vec![0.0; spec.num_routes()]);
    }
    let weights = lyapunov_weights(spec);
    let dual = LiftDual { spec, target: w.iter().map(|x| x.max(0.0) / scale).collect(), weights };
    let top = (0..spec.num_routes())
        .map(|i| spec.service_rates()[i] * dual.weights[i])
        .fold(0.0, f64::max);
    let start = vec![top; spec.num_links()];
    let out = convex::minimize(&dual, start, SOLVER_TOL * 1e-3, 10_000);
    if !(out.residual <= SOLVER_TOL) {
        return Err(Error::SolverDidNotConverge { residual: out.residual, iterations: out.iterations });
    }
    // Counts are homogeneous of degree one in the workload.
    Ok(dual.counts(&out.point).into_iter().map(|x| x * scale).collect())
}

/// `‖n − Δ(w(n))‖∞`.
pub fn manifold_distance(spec: &NetworkSpec, n: &[f64]) -> Result<f64> {
    let lifted = lift(spec, &workload(spec, n))?;
    Ok(n.iter().zip(&lifted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Right-hand side of the fluid equations. A coordinate on the boundary
/// stays there when a vanishing amount of fluid on that route would already
/// be served at least as fast as it arrives.
pub fn fluid_velocity(spec: &NetworkSpec, n: &[f64]) -> Result<Vec<f64>> {
    let rates = allocate_real(spec, n)?.rates;
    let (nu, mu) = (spec.arrival_rates(), spec.service_rates());
    let delta = 1e-7 * n.iter().cloned().fold(1.0, f64::max);
    let mut v = vec![0.0; n.len()];
    for i in 0..n.len() {
        if n[i] > BOUNDARY {
            v[i] = nu[i] - mu[i] * rates[i];
        } else {
            let mut probe = n.to_vec();
            probe[i] = delta;
            let growth = nu[i] - mu[i] * allocate_real(spec, &probe)?.rates[i];
            v[i] = growth.max(0.0);
        }
    }
    Ok(v)
}

/// Default step `1e−3 · min_j C_j / max_i ν_i`.
pub fn default_step(spec: &NetworkSpec) -> f64 {
    let cmin = spec.capacity().iter().cloned().fold(f64::INFINITY, f64::min);
    let numax = spec.arrival_rates().iter().cloned().fold(0.0, f64::max);
    1e-3 * cmin / numax
}

/// Forward Euler with clipping at zero, sampled every `dt`. A step is split
/// when the state is small enough that one step of size `dt` would move it
/// by more than [`SUBSTEP_FRACTION`] of its size. A state with every
/// coordinate on the boundary is set to zero.
pub fn fms_integrate(spec: &NetworkSpec, n0: &[f64], horizon: f64, dt: f64) -> Result<FluidTrajectory> {
    if !(dt > 0.0) || n0.iter().any(|&x| x < 0.0) {
        return Err(Error::Precondition("fluid integration needs dt > 0 and n0 >= 0".into()));
    }
    let steps = (horizon / dt).round().max(0.0) as usize;
    let mut n = n0.to_vec();
    let mut traj = FluidTrajectory {
        times: vec![0.0],
        states: vec![n.clone()],
        lyapunov_values: vec![f_alpha(spec, &n)],
    };
    for k in 1..=steps {
        let mut left = dt;
        while left > 0.0 {
            let size = n.iter().cloned().fold(0.0, f64::max);
            if size <= BOUNDARY {
                n.iter_mut().for_each(|x| *x = 0.0);
                break;
            }
            let v = fluid_velocity(spec, &n)?;
            let speed = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
            let h = if speed * left > SUBSTEP_FRACTION * size { SUBSTEP_FRACTION * size / speed } else { left };
            for i in 0..n.len() {
                n[i] = (n[i] + h * v[i]).max(0.0);
                if n[i] <= BOUNDARY && v[i] <= 0.0 {
                    n[i] = 0.0;
                }
            }
            left = if h < left { left - h } else { 0.0 };
        }
        traj.times.push(k as f64 * dt);
        traj.lyapunov_values.push(f_alpha(spec, &n));
        traj.states.push(n.clone());
    }
    Ok(traj)
}

/// Step-size check: largest deviation at the common sample times between
/// runs with `dt` and `dt/2`.
pub fn richardson_gap(spec: &NetworkSpec, n0: &[f64], horizon: f64, dt: f64) -> Result<f64> {
    let coarse = fms_integrate(spec, n0, horizon, dt)?;
    let fine = fms_integrate(spec, n0, horizon, dt / 2.0)?;
    Ok(coarse
        .states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let f = &fine.states[(2 * k).min(fine.states.len() - 1)];
            s.iter().zip(f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max))
}

/// Nonnegative least squares `min ‖Bx − y‖₂` over `x ≥ 0` by the active-set
/// method of Lawson and Hanson.
pub fn nnls(b: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let cols = b.ncols();
    let tol = 1e-12 * (1.0 + b.abs().max()) * (1.0 + y.amax());
    let mut x = DVector::zeros(cols);
    let mut passive = vec![false; cols];
    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..cols).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(b.nrows(), idx.len(), |r, c| b[(r, idx[c])]);
        let z = sub.svd(true, true).solve(y, 1e-14).expect("SVD solve with both factors");
        let mut full = DVector::zeros(cols);
        for (c, &j) in idx.iter().enumerate() {
            full[j] = z[c];
        }
        full
    };
    for _ in 0..(3 * cols + 10) {
        let grad = b.transpose() * (y - b * &x);
        let candidate = (0..cols)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&a, &c| grad[a].total_cmp(&grad[c]));
        let Some(enter) = candidate else { break };
        passive[enter] = true;
        loop {
            let z = solve_passive(&passive);
            if (0..cols).all(|j| !passive[j] || z[j] > 0.0) {
                x = z;
                break;
            }
            // Step back to the boundary and drop the variables that hit it.
            let step = (0..cols)
                .filter(|&j| passive[j] && z[j] <= 0.0)
                .map(|j| x[j] / (x[j] - z[j]))
                .fold(f64::INFINITY, f64::min);
            x += (&z - &x) * step;
            for j in 0..cols {
                if passive[j] && x[j] <= tol {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    x
}

/// Whether `n_i = ρ_i (Aᵀq)_i / κ_i` for some `q ≥ 0`, for a critically
/// loaded network with α = 1. Returns the fitted `q` and the decision.
pub fn manifold_membership_dual(spec: &NetworkSpec, n: &[f64], tol: f64) -> Result<(bool, Vec<f64>)> {
    if spec.alpha() != 1.0 {
        return Err(Error::Precondition(format!("dual manifold test needs alpha = 1, got {}", spec.alpha())));
    }
    let defect = criticality_defect(spec);
    if defect > CRITICALITY_TOL {
        return Err(Error::Precondition(format!("dual manifold test needs A rho = C, defect {defect:e}")));
    }
    let rho = spec.rho();
    let b = DMatrix::from_fn(spec.num_routes(), spec.num_links(), |i, j| {
        if spec.uses(j, i) {
            rho[i] / spec.kappa()[i]
        } else {
            0.0
        }
    });
    let y = DVector::from_column_slice(n);
    let q = nnls(&b, &y);
    let residual = (&b * &q - &y).amax();
    Ok((residual <= tol, q.iter().copied().collect()))
}
