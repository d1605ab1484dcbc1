//! Per-state α-fair bandwidth allocation.
//!
//! The allocation maximizes `Σ κ_i n_i^α Λ_i^{1−α}/(1−α)` (log utility at
//! α = 1) over the active routes subject to the link capacities. It is solved
//! in the link prices: for prices `p ≥ 0` the primal response is
//! `Λ_i = n_i (κ_i / (Aᵀp)_i)^{1/α}`, and the prices minimize the convex dual.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::convex::{self, OrthantProblem};
use crate::error::{Error, Result};
use crate::model::NetworkSpec;

/// Counts below this are treated as zero.
pub const ACTIVE_THRESHOLD: f64 = 1e-12;
/// Optimality residual the solver must reach.
pub const SOLVER_TOL: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 100_000;

/// Number of flows in progress on each route.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowState {
    counts: Vec<u32>,
}

impl FlowState {
    pub fn new(counts: Vec<u32>) -> Self {
        FlowState { counts }
    }

    pub fn zeros(routes: usize) -> Self {
        FlowState { counts: vec![0; routes] }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn counts_mut(&mut self) -> &mut [u32] {
        &mut self.counts
    }

    pub fn to_real(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Largest coordinate.
    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

impl From<Vec<u32>> for FlowState {
    fn from(counts: Vec<u32>) -> Self {
        FlowState { counts }
    }
}

/// Bandwidth per route together with the link prices certifying it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Allocation {
    pub rates: Vec<f64>,
    pub dual_prices: Vec<f64>,
    pub kkt_residual: f64,
}

/// Dual of the allocation program restricted to the active routes, with the
/// counts rescaled so the largest is one.
struct AllocationDual<'a> {
    spec: &'a NetworkSpec,
    n: Vec<f64>,
    active: Vec<usize>,
    inv_alpha: f64,
    kappa_root: Vec<f64>,
}

impl<'a> AllocationDual<'a> {
    fn new(spec: &'a NetworkSpec, n: Vec<f64>) -> Self {
        let active = (0..n.len()).filter(|&i| n[i] >= ACTIVE_THRESHOLD).collect();
        let inv_alpha = 1.0 / spec.alpha();
        let kappa_root = spec.kappa().iter().map(|k| k.powf(inv_alpha)).collect();
        AllocationDual { spec, n, active, inv_alpha, kappa_root }
    }

    /// Route price totals `(Aᵀp)_i`.
    fn route_price(&self, p: &[f64], i: usize) -> f64 {
        self.spec.route_links(i).iter().map(|&j| p[j]).sum()
    }

    /// Primal response to prices; `None` when an active route has zero price.
    fn rates(&self, p: &[f64]) -> Option<Vec<f64>> {
        let mut rates = vec![0.0; self.n.len()];
        for &i in &self.active {
            let y = self.route_price(p, i);
            if !(y > 0.0) {
                return None;
            }
            rates[i] = self.n[i] * self.kappa_root[i] * y.powf(-self.inv_alpha);
        }
        Some(rates)
    }

    fn starting_prices(&self) -> Vec<f64> {
        let spec = self.spec;
        let links = spec.num_links();
        let mut sharing = vec![0usize; links];
        for &i in &self.active {
            for &j in spec.route_links(i) {
                sharing[j] += 1;
            }
        }
        let mut p = vec![0.0; links];
        let alpha = spec.alpha();
        for &i in &self.active {
            let hops = spec.route_links(i);
            let share = hops
                .iter()
                .map(|&j| spec.capacity()[j] / sharing[j] as f64)
                .fold(f64::INFINITY, f64::min);
            let y = spec.kappa()[i] * (self.n[i] / share).powf(alpha);
            for &j in hops {
                p[j] = f64::max(p[j], y / hops.len() as f64);
            }
        }
        p
    }
}

impl OrthantProblem for AllocationDual<'_> {
    fn dim(&self) -> usize {
        self.spec.num_links()
    }

    fn value(&self, p: &[f64]) -> Option<f64> {
        let alpha = self.spec.alpha();
        let mut total: f64 = p.iter().zip(self.spec.capacity()).map(|(a, c)| a * c).sum();
        for &i in &self.active {
            let y = self.route_price(p, i);
            if !(y > 0.0) {
                return None;
            }
            let n = self.n[i];
            total += if alpha == 1.0 {
                -self.spec.kappa()[i] * n * y.ln()
            } else {
                alpha / (1.0 - alpha) * n * self.kappa_root[i] * y.powf((alpha - 1.0) / alpha)
            };
        }
        total.is_finite().then_some(total)
    }

    fn derivatives(&self, p: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let links = self.dim();
        let rates = self.rates(p).expect("derivatives requested outside the domain");
        let mut grad = self.spec.capacity().to_vec();
        let mut hess = DMatrix::zeros(links, links);
        for &i in &self.active {
            let y = self.route_price(p, i);
            let curv = self.inv_alpha * rates[i] / y;
            let hops = self.spec.route_links(i);
            for &j in hops {
                grad[j] -= rates[i];
                for &k in hops {
                    hess[(j, k)] += curv;
                }
            }
        }
        (grad, hess)
    }

    fn residual(&self, p: &[f64]) -> f64 {
        match self.rates(p) {
            Some(rates) => residual_parts(self.spec, &self.n, &rates, p),
            None => f64::INFINITY,
        }
    }
}

fn residual_parts(spec: &NetworkSpec, n: &[f64], rates: &[f64], p: &[f64]) -> f64 {
    let alpha = spec.alpha();
    let y = spec.route_totals(p);
    let mut stationarity: f64 = 0.0;
    for i in 0..n.len() {
        if n[i] >= ACTIVE_THRESHOLD {
            let marginal = if rates[i] > 0.0 {
                spec.kappa()[i] * (n[i] / rates[i]).powf(alpha)
            } else {
                f64::INFINITY
            };
            stationarity = stationarity.max((marginal - y[i]).abs());
        }
    }
    let load = spec.link_totals(rates);
    let mut slackness: f64 = 0.0;
    let mut infeasibility: f64 = 0.0;
    for j in 0..spec.num_links() {
        let slack = spec.capacity()[j] - load[j];
        slackness = slackness.max((p[j] * slack).abs());
        infeasibility = infeasibility.max(-slack);
    }
    stationarity + slackness + infeasibility.max(0.0)
}

/// Optimality residual of `alloc` at the (possibly real-valued) state `n`:
/// stationarity on the active routes plus complementary slackness plus primal
/// infeasibility. Zero exactly at the optimum.
pub fn kkt_residual(spec: &NetworkSpec, n: &[f64], alloc: &Allocation) -> f64 {
    residual_parts(spec, n, &alloc.rates, &alloc.dual_prices)
}

/// The α-fair allocation at an integer state.
pub fn allocate(spec: &NetworkSpec, state: &FlowState) -> Result<Allocation> {
    allocate_real(spec, &state.to_real())
}

/// The α-fair allocation at a real-valued count vector.
pub fn allocate_real(spec: &NetworkSpec, n: &[f64]) -> Result<Allocation> {
    assert_eq!(n.len(), spec.num_routes(), "state length must match route count");
    let scale = n.iter().cloned().fold(0.0, f64::max);
    if scale < ACTIVE_THRESHOLD {
        return Ok(Allocation {
            rates: vec![0.0; n.len()],
            dual_prices: vec![0.0; spec.num_links()],
            kkt_residual: 0.0,
        });
    }
    // Rates are invariant under scaling n; prices scale like scale^α.
    let normalized: Vec<f64> = n
        .iter()
        .map(|&x| if x >= ACTIVE_THRESHOLD { x / scale } else { 0.0 })
        .collect();
    let dual = AllocationDual::new(spec, normalized);
    let start = dual.starting_prices();
    let out = convex::minimize(&dual, start, SOLVER_TOL * 1e-3, MAX_ITERATIONS);
    if !(out.residual <= SOLVER_TOL) {
        return Err(Error::SolverDidNotConverge {
            residual: out.residual,
            iterations: out.iterations,
        });
    }
    let rates = dual.rates(&out.point).expect("converged prices lie in the domain");
    let price_scale = scale.powf(spec.alpha());
    let dual_prices: Vec<f64> = out.point.iter().map(|p| p * price_scale).collect();
    let mut alloc = Allocation { rates, dual_prices, kkt_residual: 0.0 };
    alloc.kkt_residual = kkt_residual(spec, n, &alloc);
    Ok(alloc)
}

/// Closed-form allocation for a single-link network:
/// `Λ_i = C κ_i^{1/α} n_i / Σ_k κ_k^{1/α} n_k`.
pub fn single_link_oracle(spec: &NetworkSpec, n: &[f64]) -> Result<Allocation> {
    if spec.num_links() != 1 {
        return Err(Error::Precondition(format!(
            "closed form needs one link, spec has {}",
            spec.num_links()
        )));
    }
    let alpha = spec.alpha();
    let c = spec.capacity()[0];
    let weighted: Vec<f64> = n
        .iter()
        .zip(spec.kappa())
        .map(|(&x, k)| if x >= ACTIVE_THRESHOLD { k.powf(1.0 / alpha) * x } else { 0.0 })
        .collect();
    let total: f64 = weighted.iter().sum();
    if total == 0.0 {
        return Ok(Allocation { rates: vec![0.0; n.len()], dual_prices: vec![0.0], kkt_residual: 0.0 });
    }
    let rates: Vec<f64> = weighted.iter().map(|w| c * w / total).collect();
    let price = (total / c).powf(alpha);
    let mut alloc = Allocation { rates, dual_prices: vec![price], kkt_residual: 0.0 };
    alloc.kkt_residual = kkt_residual(spec, n, &alloc);
    Ok(alloc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(kappa: Vec<f64>, alpha: f64, c: f64) -> NetworkSpec {
        let r = kappa.len();
        NetworkSpec::single_link(c, kappa, alpha, vec![0.1; r], vec![1.0; r]).unwrap()
    }

    /// A route with a vanishing count on a link that is nearly slack drives
    /// that link's price towards zero while the other price stays O(1).
    #[test]
    fn tiny_count_next_to_slack_link() {
        let spec = NetworkSpec::new(
            vec![vec![1, 1, 0], vec![1, 0, 1]],
            vec![1.0, 2.0],
            vec![1.0, 2.0, 1.0],
            2.0,
            vec![0.3, 0.7, 1.7],
            vec![1.0; 3],
        )
        .unwrap();
        for tiny in [1e-5, 1e-9, 2.87e-11] {
            let a = allocate_real(&spec, &[0.375, tiny, 2.125]).unwrap();
            assert!(a.kkt_residual <= 1e-9, "{tiny}: {}", a.kkt_residual);
            assert!((a.rates[0] - 0.3).abs() < 1e-8 && (a.rates[2] - 1.7).abs() < 1e-8);
        }
    }

    fn three_link() -> NetworkSpec {
        NetworkSpec::new(
            vec![vec![1, 1, 0, 0, 1], vec![1, 0, 1, 0, 0], vec![1, 0, 0, 1, 1]],
            vec![1.0, 2.0, 1.5],
            vec![1.0, 2.0, 1.0, 0.5, 3.0],
            1.0,
            vec![0.1; 5],
            vec![1.0; 5],
        )
        .unwrap()
    }

    /// Brute-force maximizer of the utility over the simplex
    /// `Λ_1 + Λ_2 = C`, refined by successive grids.
    fn grid_oracle(kappa: [f64; 2], alpha: f64, n: [f64; 2], c: f64) -> [f64; 2] {
        let util = |l: f64| {
            let l = [l, c - l];
            (0..2)
                .map(|i| {
                    if alpha == 1.0 {
                        kappa[i] * n[i] * l[i].ln()
                    } else {
                        kappa[i] * n[i].powf(alpha) * l[i].powf(1.0 - alpha) / (1.0 - alpha)
                    }
                })
                .sum::<f64>()
        };
        let (mut lo, mut hi) = (0.0, c);
        for _ in 0..8 {
            let steps = 200;
            let h = (hi - lo) / steps as f64;
            let best = (1..steps)
                .map(|k| lo + k as f64 * h)
                .max_by(|a, b| util(*a).partial_cmp(&util(*b)).unwrap())
                .unwrap();
            lo = (best - h).max(0.0);
            hi = (best + h).min(c);
        }
        let l = 0.5 * (lo + hi);
        [l, c - l]
    }

    #[test]
    fn closed_form_matches_grid_search() {
        for &alpha in &[0.5, 1.0, 2.0] {
            for kappa in [[1.0, 1.0], [1.0, 4.0]] {
                for n in [[1.0, 2.0], [3.0, 1.0], [2.0, 5.0]] {
                    let spec = single(kappa.to_vec(), alpha, 2.0);
                    let closed = single_link_oracle(&spec, &n).unwrap();
                    let grid = grid_oracle(kappa, alpha, n, 2.0);
                    for i in 0..2 {
                        // The objective is flat at the optimum, so a grid only resolves ~sqrt(ulp).
                        assert!((closed.rates[i] - grid[i]).abs() < 1e-6, "{alpha} {kappa:?} {n:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn documented_examples() {
        let spec = single(vec![1.0, 1.0], 1.0, 1.0);
        let a = allocate(&spec, &FlowState::new(vec![0, 0])).unwrap();
        assert_eq!(a.rates, vec![0.0, 0.0]);
        let a = allocate(&spec, &FlowState::new(vec![1, 2])).unwrap();
        assert!((a.rates[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((a.rates[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((a.dual_prices[0] - 3.0).abs() < 1e-9);
        for alpha in [0.3, 1.0, 2.5] {
            let a = allocate(&single(vec![1.0, 1.0], alpha, 1.0), &FlowState::new(vec![1, 1])).unwrap();
            assert!((a.rates[0] - 0.5).abs() < 1e-12 && (a.rates[1] - 0.5).abs() < 1e-12);
        }
        let a = allocate(&single(vec![1.0, 1.0], 2.0, 1.0), &FlowState::new(vec![1, 2])).unwrap();
        assert!((a.rates[0] - 1.0 / 3.0).abs() < 1e-12);
        let a = allocate(&single(vec![1.0, 4.0], 2.0, 2.0), &FlowState::new(vec![1, 1])).unwrap();
        assert!((a.rates[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((a.rates[1] - 4.0 / 3.0).abs() < 1e-12);
        let a = allocate(&single(vec![1.0, 4.0], 2.0, 2.0), &FlowState::new(vec![0, 5])).unwrap();
        assert_eq!(a.rates[0], 0.0);
        assert!((a.rates[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn residual_examples() {
        let spec = single(vec![1.0, 1.0], 1.0, 1.0);
        let exact = Allocation { rates: vec![1.0 / 3.0, 2.0 / 3.0], dual_prices: vec![3.0], kkt_residual: 0.0 };
        assert!(kkt_residual(&spec, &[1.0, 2.0], &exact) < 1e-14);
        let over = Allocation { rates: vec![0.5, 0.6], dual_prices: vec![2.0], kkt_residual: 0.0 };
        assert!(kkt_residual(&spec, &[1.0, 1.0], &over) >= 0.1);
        let one = Allocation { rates: vec![0.0, 1.0], dual_prices: vec![3.0], kkt_residual: 0.0 };
        assert!(kkt_residual(&spec, &[0.0, 3.0], &one) < 1e-14);
    }

    #[test]
    fn oracle_rejects_multi_link() {
        assert!(single_link_oracle(&three_link(), &[1.0; 5]).is_err());
    }

    #[test]
    fn multi_link_bottlenecks() {
        // Route 0 crosses both links; routes 1, 2 are local. Proportional
        // fairness on a symmetric two-link line gives 1/3 to the long route.
        let spec = NetworkSpec::new(
            vec![vec![1, 1, 0], vec![1, 0, 1]],
            vec![1.0, 1.0],
            vec![1.0; 3],
            1.0,
            vec![0.1; 3],
            vec![1.0; 3],
        )
        .unwrap();
        let a = allocate(&spec, &FlowState::new(vec![1, 1, 1])).unwrap();
        assert!((a.rates[0] - 1.0 / 3.0).abs() < 1e-10);
        assert!((a.rates[1] - 2.0 / 3.0).abs() < 1e-10);
        // Only the long route active: it gets the full bottleneck.
        let a = allocate(&spec, &FlowState::new(vec![4, 0, 0])).unwrap();
        assert!((a.rates[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn huge_and_tiny_counts() {
        let spec = three_link();
        let a = allocate_real(&spec, &[1e6, 1.0, 3.0, 1e-3, 2e5]).unwrap();
        let b = allocate_real(&spec, &[1.0, 1e-6, 3e-6, 1e-9, 0.2]).unwrap();
        for (x, y) in a.rates.iter().zip(&b.rates) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(a.rates.iter().all(|&x| x > 0.0));
    }

    proptest! {
        #[test]
        fn feasible_positive_and_certified(n in proptest::collection::vec(0u32..20, 5), alpha in prop::sample::select(vec![0.5, 1.0, 2.0])) {
            let base = three_link();
            let spec = NetworkSpec::new(
                vec![vec![1, 1, 0, 0, 1], vec![1, 0, 1, 0, 0], vec![1, 0, 0, 1, 1]],
                base.capacity().to_vec(), base.kappa().to_vec(), alpha, vec![0.1; 5], vec![1.0; 5],
            ).unwrap();
            let a = allocate(&spec, &FlowState::new(n.clone())).unwrap();
            prop_assert!(a.kkt_residual <= 1e-9);
            let load = spec.link_totals(&a.rates);
            for (l, c) in load.iter().zip(spec.capacity()) {
                prop_assert!(*l <= c + 1e-8);
            }
            for (i, &c) in n.iter().enumerate() {
                if c == 0 { prop_assert_eq!(a.rates[i], 0.0); } else { prop_assert!(a.rates[i] > 0.0); }
            }
        }

        #[test]
        fn matches_closed_form(n in proptest::collection::vec(0.0f64..50.0, 3), alpha in 0.2f64..4.0) {
            let spec = single(vec![1.0, 2.0, 0.5], alpha, 1.5);
            let a = allocate_real(&spec, &n).unwrap();
            let b = single_link_oracle(&spec, &n).unwrap();
            for (x, y) in a.rates.iter().zip(&b.rates) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn lipschitz_in_the_interior(n in proptest::collection::vec(1.0f64..10.0, 5), k in 0usize..5) {
            let spec = three_link();
            let a = allocate_real(&spec, &n).unwrap();
            let mut m = n.clone();
            m[k] += 1e-4;
            let b = allocate_real(&spec, &m).unwrap();
            let moved = a.rates.iter().zip(&b.rates).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(moved <= 100.0 * 1e-4);
        }
    }
}
