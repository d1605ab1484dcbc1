//! Simulation of the flow-count process: the event-driven chain, the
//! uniformized discrete-time chain, and stationary laws (exact on a truncated
//! lattice, or empirical).

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::allocator::{allocate, FlowState};
use crate::error::{Error, Result};
use crate::model::{load_profile, uniformization_rate, NetworkSpec};

/// Runaway guard on any single coordinate.
pub const DEFAULT_STATE_CAP: u32 = 1_000_000;
/// Largest truncated lattice the exact solver accepts.
pub const EXACT_STATE_BUDGET: usize = 4_000_000;
/// Entries kept in the allocation memo before it is flushed.
const CACHE_LIMIT: usize = 1 << 20;

/// Generator for replica `stream` of an experiment seeded with `seed`.
///
/// ChaCha8 with the seed expanded by `seed_from_u64` and the replica index as
/// the stream id, so replicas are independent and reproducible regardless of
/// how they are scheduled.
pub fn replica_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Piecewise-constant sample path. `states[k]` holds on `[times[k], times[k+1])`
/// and the last state holds until `horizon`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub horizon: f64,
}

impl Trace {
    /// Checks time ordering and that consecutive states differ by `±step` in
    /// at most one coordinate.
    pub fn is_well_formed(&self, step: f64) -> bool {
        if self.times.len() != self.states.len() || self.times.first() != Some(&0.0) {
            return false;
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return false;
        }
        if self.times.last().is_some_and(|&t| t > self.horizon) {
            return false;
        }
        self.states.windows(2).all(|w| {
            let moved: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| b - a).filter(|d| *d != 0.0).collect();
            moved.is_empty() || (moved.len() == 1 && ((moved[0].abs() - step).abs() <= 1e-12 * step.max(1.0)))
        })
    }

    /// For each event after the first state: the changed coordinate and the
    /// signed change. Self-loops report `None`.
    pub fn increments(&self) -> Vec<Option<(usize, f64)>> {
        self.states
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .enumerate()
                    .find(|(_, (a, b))| a != b)
                    .map(|(i, (a, b))| (i, b - a))
            })
            .collect()
    }
}

/// Supremum over time and routes of the path.
pub fn max_excursion(trace: &Trace) -> f64 {
    trace.states.iter().flatten().cloned().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StationaryMethod {
    ExactTruncated,
    MonteCarlo,
}

/// A stationary law on finitely many states, sorted lexicographically.
#[derive(Debug, Clone, Serialize)]
pub struct StationaryEstimate {
    pub support: Vec<FlowState>,
    pub probabilities: Vec<f64>,
    pub method: StationaryMethod,
    /// Lattice cap for exact solves, step count for Monte Carlo.
    pub truncation_or_samples: u64,
}

impl StationaryEstimate {
    /// Total variation distance to a law given by its mass function, assumed
    /// to sum to one over all states (mass off this support counts fully).
    pub fn tv_to_pmf(&self, pmf: impl Fn(&[u32]) -> f64) -> f64 {
        let mut diff = 0.0;
        let mut covered = 0.0;
        for (s, &p) in self.support.iter().zip(&self.probabilities) {
            let q = pmf(s.counts());
            covered += q;
            diff += (p - q).abs();
        }
        0.5 * (diff + (1.0 - covered).max(0.0))
    }

    /// Total variation distance between two estimates.
    pub fn tv_distance(&self, other: &StationaryEstimate) -> f64 {
        let mut merged: BTreeMap<&[u32], (f64, f64)> = BTreeMap::new();
        for (s, &p) in self.support.iter().zip(&self.probabilities) {
            merged.entry(s.counts()).or_default().0 += p;
        }
        for (s, &p) in other.support.iter().zip(&other.probabilities) {
            merged.entry(s.counts()).or_default().1 += p;
        }
        0.5 * merged.values().map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Expectation of `f` under the law.
    pub fn expect(&self, f: impl Fn(&[u32]) -> f64) -> f64 {
        self.support
            .iter()
            .zip(&self.probabilities)
            .map(|(s, p)| p * f(s.counts()))
            .sum()
    }

    /// `P(g(N) ≥ x)`.
    pub fn tail(&self, g: impl Fn(&[u32]) -> f64, x: f64) -> f64 {
        self.expect(|s| if g(s) >= x { 1.0 } else { 0.0 })
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Allocation memo keyed by the primitive direction of the state. Rates are
/// invariant under scaling the state, so `n` and `n/gcd(n)` share an entry.
pub struct AllocationCache<'a> {
    spec: &'a NetworkSpec,
    map: HashMap<Vec<u32>, Vec<f64>>,
}

impl<'a> AllocationCache<'a> {
    pub fn new(spec: &'a NetworkSpec) -> Self {
        AllocationCache { spec, map: HashMap::new() }
    }

    pub fn rates(&mut self, counts: &[u32]) -> Result<Vec<f64>> {
        let g = counts.iter().fold(0, |g, &c| gcd(g, c));
        if g == 0 {
            return Ok(vec![0.0; counts.len()]);
        }
        let key: Vec<u32> = counts.iter().map(|c| c / g).collect();
        if let Some(r) = self.map.get(&key) {
            return Ok(r.clone());
        }
        let rates = allocate(self.spec, &FlowState::new(key.clone()))?.rates;
        if self.map.len() >= CACHE_LIMIT {
            self.map.clear();
        }
        self.map.insert(key, rates.clone());
        Ok(rates)
    }
}

/// Uniform draw in (0, 1].
fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Stateful driver for one replica: owns the allocation memo and state cap.
pub struct Simulator<'a> {
    spec: &'a NetworkSpec,
    cache: AllocationCache<'a>,
    state_cap: u32,
    xi: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(spec: &'a NetworkSpec) -> Self {
        Simulator {
            spec,
            cache: AllocationCache::new(spec),
            state_cap: DEFAULT_STATE_CAP,
            xi: uniformization_rate(spec),
        }
    }

    pub fn with_state_cap(mut self, cap: u32) -> Self {
        self.state_cap = cap;
        self
    }

    /// Departure rates `μ_i Λ_i(n)`.
    pub fn departure_rates(&mut self, state: &FlowState) -> Result<Vec<f64>> {
        let rates = self.cache.rates(state.counts())?;
        Ok(rates.iter().zip(self.spec.service_rates()).map(|(l, m)| l * m).collect())
    }

    /// Applies the transition selected by `u ∈ [0, total)` where arrivals come
    /// first, then departures. Returns the moved coordinate and direction, or
    /// `None` if `u` falls past both (a self-loop).
    fn apply(&self, state: &mut FlowState, departures: &[f64], mut u: f64) -> Result<Option<(usize, bool)>> {
        for (i, &nu) in self.spec.arrival_rates().iter().enumerate() {
            if u < nu {
                let c = &mut state.counts_mut()[i];
                if *c >= self.state_cap {
                    return Err(Error::StateCapExceeded { route: i, cap: self.state_cap });
                }
                *c += 1;
                return Ok(Some((i, true)));
            }
            u -= nu;
        }
        for (i, &d) in departures.iter().enumerate() {
            if d > 0.0 && u < d {
                state.counts_mut()[i] -= 1;
                return Ok(Some((i, false)));
            }
            u -= d;
        }
        Ok(None)
    }

    /// One step of the uniformized chain. Returns the move made, if any.
    pub fn uniformized_step<R: Rng>(&mut self, state: &mut FlowState, rng: &mut R) -> Result<Option<(usize, bool)>> {
        let departures = self.departure_rates(state)?;
        let u = rng.gen::<f64>() * self.xi;
        self.apply(state, &departures, u)
    }

    /// Runs the event-driven chain on `[0, horizon]`, calling `visit` with
    /// each event time and the state entered (starting with time 0).
    pub fn run_ctmc<R: Rng>(
        &mut self,
        initial: &FlowState,
        horizon: f64,
        rng: &mut R,
        mut visit: impl FnMut(f64, &FlowState),
    ) -> Result<()> {
        let mut state = initial.clone();
        let mut t = 0.0;
        visit(t, &state);
        let arrivals: f64 = self.spec.arrival_rates().iter().sum();
        loop {
            let departures = self.departure_rates(&state)?;
            let total = arrivals + departures.iter().sum::<f64>();
            t += -open_unit(rng).ln() / total;
            if t > horizon {
                return Ok(());
            }
            let u = rng.gen::<f64>() * total;
            if self.apply(&mut state, &departures, u)?.is_none() {
                // Rounding pushed u past the last rate; treat as the last departure.
                let last = departures.iter().rposition(|&d| d > 0.0).expect("positive total rate");
                state.counts_mut()[last] -= 1;
            }
            visit(t, &state);
        }
    }
}

/// Sample path of the flow-count process from `initial` over `[0, horizon]`.
pub fn simulate_ctmc(spec: &NetworkSpec, initial: &FlowState, horizon: f64, seed: u64) -> Result<Trace> {
    simulate_ctmc_stream(spec, initial, horizon, seed, 0)
}

/// As [`simulate_ctmc`], on random stream `stream` of `seed`.
pub fn simulate_ctmc_stream(
    spec: &NetworkSpec,
    initial: &FlowState,
    horizon: f64,
    seed: u64,
    stream: u64,
) -> Result<Trace> {
    assert!(horizon > 0.0, "horizon must be positive");
    let mut rng = replica_rng(seed, stream);
    let mut trace = Trace { times: Vec::new(), states: Vec::new(), horizon };
    Simulator::new(spec).run_ctmc(initial, horizon, &mut rng, |t, s| {
        trace.times.push(t);
        trace.states.push(s.to_real());
    })?;
    Ok(trace)
}

/// One step of the uniformized chain from `state`.
pub fn uniformized_step<R: Rng>(spec: &NetworkSpec, state: &FlowState, rng: &mut R) -> Result<FlowState> {
    let mut next = state.clone();
    Simulator::new(spec).uniformized_step(&mut next, rng)?;
    Ok(next)
}

/// Empirical occupancy of the uniformized chain started empty, after
/// `burn_in` discarded steps.
pub fn estimate_stationary(spec: &NetworkSpec, burn_in: u64, steps: u64, seed: u64) -> Result<StationaryEstimate> {
    estimate_stationary_stream(spec, burn_in, steps, seed, 0)
}

/// As [`estimate_stationary`], on replica stream `stream` of `seed`.
pub fn estimate_stationary_stream(
    spec: &NetworkSpec,
    burn_in: u64,
    steps: u64,
    seed: u64,
    stream: u64,
) -> Result<StationaryEstimate> {
    load_profile(spec)?;
    if steps == 0 {
        return Err(Error::EmptySample);
    }
    let mut rng = replica_rng(seed, stream);
    let mut sim = Simulator::new(spec);
    let mut state = FlowState::zeros(spec.num_routes());
    for _ in 0..burn_in {
        sim.uniformized_step(&mut state, &mut rng)?;
    }
    let mut counts: BTreeMap<FlowState, u64> = BTreeMap::new();
    for _ in 0..steps {
        sim.uniformized_step(&mut state, &mut rng)?;
        *counts.entry(state.clone()).or_default() += 1;
    }
    let (support, probabilities) = counts
        .into_iter()
        .map(|(s, c)| (s, c as f64 / steps as f64))
        .unzip();
    Ok(StationaryEstimate {
        support,
        probabilities,
        method: StationaryMethod::MonteCarlo,
        truncation_or_samples: steps,
    })
}

/// Convergence target for the iterative solver: balance residual relative to
/// the total probability flux.
const BALANCE_TOL: f64 = 1e-13;
/// Balance residual accepted from the direct solver.
const DIRECT_TOL: f64 = 1e-11;
const MAX_SWEEPS: usize = 200_000;
/// Lattices in three or more dimensions above this size use the iterative
/// solver, since elimination fill grows too fast there.
const DIRECT_LIMIT_3D: usize = 200_000;

/// The truncated lattice `{0..cap}^|I|` with mixed-radix indexing, route 0
/// most significant so index order is lexicographic.
struct Lattice {
    routes: usize,
    cap: u32,
    strides: Vec<usize>,
    len: usize,
}

impl Lattice {
    fn new(routes: usize, cap: u32) -> Self {
        let side = cap as usize + 1;
        let mut strides = vec![1; routes];
        for i in (0..routes.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * side;
        }
        Lattice { routes, cap, strides, len: side.pow(routes as u32) }
    }

    fn decode(&self, mut idx: usize) -> Vec<u32> {
        let mut out = vec![0; self.routes];
        for i in 0..self.routes {
            out[i] = (idx / self.strides[i]) as u32;
            idx %= self.strides[i];
        }
        out
    }

    fn encode(&self, counts: &[u32]) -> usize {
        counts.iter().zip(&self.strides).map(|(&c, s)| c as usize * s).sum()
    }
}

/// Transition structure of the truncated chain.
struct TruncatedChain<'a> {
    lat: Lattice,
    nu: &'a [f64],
    coords: Vec<Vec<u32>>,
    /// `departures[idx * routes + i]`: service rate of route `i` at `idx`.
    departures: Vec<f64>,
    out_rate: Vec<f64>,
}

impl TruncatedChain<'_> {
    fn routes(&self) -> usize {
        self.lat.routes
    }

    /// Calls `f(source, rate)` for every transition into `idx`.
    fn for_each_inflow(&self, idx: usize, mut f: impl FnMut(usize, f64)) {
        let c = &self.coords[idx];
        for i in 0..self.routes() {
            if c[i] > 0 {
                f(idx - self.lat.strides[i], self.nu[i]);
            }
            if c[i] < self.lat.cap {
                let from = idx + self.lat.strides[i];
                f(from, self.departures[from * self.routes() + i]);
            }
        }
    }

    fn inflow(&self, pi: &[f64], idx: usize) -> f64 {
        let mut total = 0.0;
        self.for_each_inflow(idx, |from, rate| total += pi[from] * rate);
        total
    }

    /// Total imbalance of the balance equations relative to total flux.
    fn balance_residual(&self, pi: &[f64]) -> f64 {
        // Terms are computed in parallel but summed in index order so the
        // result does not depend on the thread count.
        let terms: Vec<(f64, f64)> = (0..self.lat.len)
            .into_par_iter()
            .map(|idx| {
                let out = pi[idx] * self.out_rate[idx];
                ((self.inflow(pi, idx) - out).abs(), out)
            })
            .collect();
        let (imbalance, flux) = terms.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        if flux > 0.0 {
            imbalance / flux
        } else {
            0.0
        }
    }
}

/// Stationary law of the chain restricted to `{0..cap}^|I|`, where arrivals
/// leaving the box are suppressed. Uses the default state budget.
pub fn exact_stationary(spec: &NetworkSpec, cap: u32) -> Result<StationaryEstimate> {
    exact_stationary_with_budget(spec, cap, EXACT_STATE_BUDGET)
}

/// Solves the global balance equations on the truncated lattice, by sparse
/// LU when the lattice allows it and by aggregation/Gauss-Seidel otherwise.
pub fn exact_stationary_with_budget(spec: &NetworkSpec, cap: u32, budget: usize) -> Result<StationaryEstimate> {
    load_profile(spec)?;
    let routes = spec.num_routes();
    let states = (cap as f64 + 1.0).powi(routes as i32);
    if states > budget as f64 {
        return Err(Error::CapTooLargeForBudget { states, budget });
    }
    let lat = Lattice::new(routes, cap);
    let nu = spec.arrival_rates();
    let mu = spec.service_rates();

    // Departure rates: solve on primitive directions, copy along rays.
    let primitive: Vec<Option<Vec<f64>>> = (0..lat.len)
        .into_par_iter()
        .map(|idx| {
            let c = lat.decode(idx);
            let g = c.iter().fold(0, |g, &x| gcd(g, x));
            if g > 1 {
                return Ok(None);
            }
            let rates = allocate(spec, &FlowState::new(c))?.rates;
            Ok(Some(rates.iter().zip(mu).map(|(l, m)| l * m).collect()))
        })
        .collect::<Result<_>>()?;
    let mut departures = vec![0.0; lat.len * routes];
    for idx in 0..lat.len {
        let src = match &primitive[idx] {
            Some(r) => r.clone(),
            None => {
                let c = lat.decode(idx);
                let g = c.iter().fold(0, |g, &x| gcd(g, x));
                let reduced: Vec<u32> = c.iter().map(|x| x / g).collect();
                primitive[lat.encode(&reduced)].clone().expect("primitive direction solved")
            }
        };
        departures[idx * routes..(idx + 1) * routes].copy_from_slice(&src);
    }
    drop(primitive);

    let coords: Vec<Vec<u32>> = (0..lat.len).map(|idx| lat.decode(idx)).collect();
    let out_rate: Vec<f64> = (0..lat.len)
        .map(|idx| {
            let up: f64 = (0..routes).filter(|&i| coords[idx][i] < cap).map(|i| nu[i]).sum();
            up + departures[idx * routes..(idx + 1) * routes].iter().sum::<f64>()
        })
        .collect();
    let chain = TruncatedChain { lat, nu, coords, departures, out_rate };

    let pi = if routes <= 2 || chain.lat.len <= DIRECT_LIMIT_3D {
        solve_direct(&chain)?
    } else {
        solve_iterative(&chain)?
    };

    let support = chain.coords.into_iter().map(FlowState::new).collect();
    Ok(StationaryEstimate {
        support,
        probabilities: pi,
        method: StationaryMethod::ExactTruncated,
        truncation_or_samples: cap as u64,
    })
}

/// Fixes the mass of the empty state and solves the remaining balance
/// equations by sparse LU, with two rounds of iterative refinement.
fn solve_direct(chain: &TruncatedChain) -> Result<Vec<f64>> {
    use faer::linalg::solvers::Solve;
    use faer::sparse::{SparseColMat, Triplet};

    let len = chain.lat.len;
    if len == 1 {
        return Ok(vec![1.0]);
    }
    // Unknowns are the states 1..len; row s holds the balance of state s.
    let mut triplets = Vec::with_capacity(len * (2 * chain.routes() + 1));
    let mut rhs = faer::Col::<f64>::zeros(len - 1);
    for idx in 1..len {
        triplets.push(Triplet::new(idx - 1, idx - 1, -chain.out_rate[idx]));
        chain.for_each_inflow(idx, |from, rate| {
            if from == 0 {
                rhs[idx - 1] -= rate;
            } else {
                triplets.push(Triplet::new(idx - 1, from - 1, rate));
            }
        });
    }
    let matrix = SparseColMat::<usize, f64>::try_new_from_triplets(len - 1, len - 1, &triplets)
        .map_err(|e| Error::Precondition(format!("balance matrix assembly failed: {e:?}")))?;
    let lu = matrix
        .sp_lu()
        .map_err(|e| Error::Precondition(format!("balance matrix is singular: {e:?}")))?;
    let mut x = lu.solve(&rhs);
    for _ in 0..2 {
        let r = &rhs - &matrix * &x;
        x += lu.solve(&r);
    }

    let mut pi = Vec::with_capacity(len);
    pi.push(1.0);
    pi.extend(x.iter().map(|&v| v.max(0.0)));
    let total: f64 = pi.iter().sum();
    for p in pi.iter_mut() {
        *p /= total;
    }
    let residual = chain.balance_residual(&pi);
    if !(residual <= DIRECT_TOL) {
        return Err(Error::SolverDidNotConverge { residual, iterations: 3 });
    }
    Ok(pi)
}

/// Transitions change the total count by one, so states are grouped into
/// levels by total count. Each sweep first fixes the level masses exactly via
/// the aggregated birth-death chain, then runs symmetric Gauss-Seidel on the
/// full balance equations to correct the within-level shape.
fn solve_iterative(chain: &TruncatedChain) -> Result<Vec<f64>> {
    let routes = chain.routes();
    let len = chain.lat.len;
    let levels = routes * chain.lat.cap as usize + 1;
    let mut by_level: Vec<Vec<usize>> = vec![Vec::new(); levels];
    for idx in 0..len {
        by_level[chain.coords[idx].iter().map(|&c| c as usize).sum::<usize>()].push(idx);
    }
    let order: Vec<usize> = by_level.iter().flatten().copied().collect();

    let mut pi = vec![1.0 / len as f64; len];
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut level_mass = vec![0.0; levels];
        let mut up = vec![0.0; levels];
        let mut down = vec![0.0; levels];
        for (l, members) in by_level.iter().enumerate() {
            for &idx in members {
                let p = pi[idx];
                let departures: f64 = chain.departures[idx * routes..(idx + 1) * routes].iter().sum();
                level_mass[l] += p;
                up[l] += p * (chain.out_rate[idx] - departures);
                down[l] += p * departures;
            }
        }
        let mut agg = vec![0.0; levels];
        agg[0] = 1.0;
        for l in 1..levels {
            let (u, d) = (up[l - 1] / level_mass[l - 1], down[l] / level_mass[l]);
            agg[l] = if d > 0.0 { agg[l - 1] * u / d } else { 0.0 };
        }
        let agg_total: f64 = agg.iter().sum();
        for (l, members) in by_level.iter().enumerate() {
            let factor = if level_mass[l] > 0.0 { agg[l] / agg_total / level_mass[l] } else { 0.0 };
            for &idx in members {
                pi[idx] *= factor;
            }
        }

        for &idx in order.iter().chain(order.iter().rev()) {
            if chain.out_rate[idx] > 0.0 {
                pi[idx] = chain.inflow(&pi, idx) / chain.out_rate[idx];
            }
        }
        let total: f64 = pi.iter().sum();
        for p in pi.iter_mut() {
            *p /= total;
        }
        residual = chain.balance_residual(&pi);
        if residual <= BALANCE_TOL {
            return Ok(pi);
        }
    }
    Err(Error::SolverDidNotConverge { residual, iterations: sweeps })
}
