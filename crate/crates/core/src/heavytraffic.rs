//! Heavy-traffic sequences of networks approaching a critically loaded one,
//! their diffusion scaling, state space collapse diagnostics and the
//! product-form limit of the scaled stationary laws.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fluid::{lift, nnls, workload, CRITICALITY_TOL};
use crate::lyapunov::{compute_constants, tail_bound};
use crate::model::{criticality_defect, load_profile, local_traffic_holds, NetworkSpec};
use crate::simulator::{
    estimate_stationary_stream, exact_stationary, simulate_ctmc_stream, StationaryEstimate, StationaryMethod, Trace,
    EXACT_STATE_BUDGET,
};
use crate::allocator::FlowState;

/// Tolerance on `A d = θ`.
const DIRECTION_TOL: f64 = 1e-9;
/// Probability mass below which a lattice state is skipped when averaging
/// over a stationary law.
const NEGLIGIBLE_MASS: f64 = 1e-16;

/// Networks `ρʳ = ρ − d/r` approaching a critical load `ρ` with `A d = θ`,
/// realized by lowering the arrival rates and keeping service rates fixed.
#[derive(Debug, Clone, Serialize)]
pub struct HeavyTrafficFamily {
    critical: NetworkSpec,
    direction: Vec<f64>,
    theta: Vec<f64>,
    /// `D = min_j θ_j / C_j`; member `r` has gap at least `D/r`.
    family_constant: f64,
}

impl HeavyTrafficFamily {
    /// Family with the direction fitted by nonnegative least squares.
    pub fn new(critical: NetworkSpec, theta: Vec<f64>) -> Result<Self> {
        let links = critical.num_links();
        let routes = critical.num_routes();
        if theta.len() != links {
            return Err(Error::InvalidSpec(format!("theta has length {}, expected {links}", theta.len())));
        }
        let a = DMatrix::from_fn(links, routes, |j, i| if critical.uses(j, i) { 1.0 } else { 0.0 });
        let d = nnls(&a, &DVector::from_column_slice(&theta));
        Self::with_direction(critical, d.iter().copied().collect(), theta)
    }

    pub fn with_direction(critical: NetworkSpec, direction: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        let defect = criticality_defect(&critical);
        if defect > CRITICALITY_TOL {
            return Err(Error::Precondition(format!("family needs A rho = C, defect {defect:e}")));
        }
        if theta.len() != critical.num_links() || theta.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidSpec("theta must be positive with one entry per link".into()));
        }
        if direction.len() != critical.num_routes() || direction.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::InvalidSpec("direction must be nonnegative with one entry per route".into()));
        }
        let ad = critical.link_totals(&direction);
        let miss = ad.iter().zip(&theta).map(|(a, t)| (a - t).abs()).fold(0.0, f64::max);
        if miss > DIRECTION_TOL * (1.0 + theta.iter().cloned().fold(0.0, f64::max)) {
            return Err(Error::InvalidSpec(format!("A d differs from theta by {miss:e}")));
        }
        let family_constant = theta
            .iter()
            .zip(critical.capacity())
            .map(|(t, c)| t / c)
            .fold(f64::INFINITY, f64::min);
        Ok(HeavyTrafficFamily { critical, direction, theta, family_constant })
    }

    pub fn critical_spec(&self) -> &NetworkSpec {
        &self.critical
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn family_constant(&self) -> f64 {
        self.family_constant
    }

    /// Members with `r` above this have positive arrival rates.
    pub fn min_index(&self) -> f64 {
        let rho = self.critical.rho();
        self.direction.iter().zip(&rho).map(|(d, r)| d / r).fold(0.0, f64::max)
    }

    /// The `r`-th network: arrival rates `ν − μ⊙d/r`.
    pub fn member(&self, r: f64) -> Result<NetworkSpec> {
        if !(r > self.min_index()) {
            return Err(Error::Precondition(format!(
                "index {r} too small: member needs r > {}",
                self.min_index()
            )));
        }
        let nu: Vec<f64> = (0..self.critical.num_routes())
            .map(|i| self.critical.arrival_rates()[i] - self.critical.service_rates()[i] * self.direction[i] / r)
            .collect();
        let spec = self.critical.with_arrival_rates(nu)?;
        load_profile(&spec)?;
        Ok(spec)
    }

    /// Lattice cap `⌈12 r / D⌉` used for exact stationary solves.
    pub fn cap_for(&self, r: f64) -> u32 {
        (12.0 * r / self.family_constant).ceil() as u32
    }
}

fn rescale(trace: &Trace, time_factor: f64, space_factor: f64) -> Trace {
    Trace {
        times: trace.times.iter().map(|t| t / time_factor).collect(),
        states: trace.states.iter().map(|s| s.iter().map(|x| x / space_factor).collect()).collect(),
        horizon: trace.horizon / time_factor,
    }
}

/// `N(r²t)/r`.
pub fn diffusion_scale(trace: &Trace, r: f64) -> Trace {
    rescale(trace, r * r, r)
}

/// `N(rt)/r`.
pub fn fluid_scale(trace: &Trace, r: f64) -> Trace {
    rescale(trace, r, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SscMetrics {
    pub absolute: f64,
    pub multiplicative: f64,
}

/// Floor on the denominator of the multiplicative metric.
const SSC_FLOOR: f64 = 1e-9;

fn sup_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sup over the path of the distance to the lifted workload, absolute and
/// relative to the sup of `‖N̂‖∞`. The path is piecewise constant, so
/// visiting every recorded state gives the exact supremum.
pub fn ssc_metrics(spec_r: &NetworkSpec, scaled: &Trace) -> Result<SscMetrics> {
    let mut seen: HashMap<Vec<u64>, f64> = HashMap::new();
    let mut absolute: f64 = 0.0;
    let mut size: f64 = 0.0;
    for s in &scaled.states {
        let key: Vec<u64> = s.iter().map(|x| x.to_bits()).collect();
        let gap = match seen.get(&key) {
            Some(&g) => g,
            None => {
                let g = sup_norm_diff(s, &lift(spec_r, &workload(spec_r, s))?);
                seen.insert(key, g);
                g
            }
        };
        absolute = absolute.max(gap);
        size = size.max(s.iter().cloned().fold(0.0, f64::max));
    }
    Ok(SscMetrics { absolute, multiplicative: absolute / size.max(SSC_FLOOR) })
}

/// Mean of [`ssc_metrics`] over `replicas` diffusion-scaled paths of member
/// `r` started empty, over diffusion-scaled horizon `horizon`.
pub fn ssc_path_experiment(
    family: &HeavyTrafficFamily,
    r: f64,
    replicas: u64,
    horizon: f64,
    seed: u64,
) -> Result<SscMetrics> {
    let spec = family.member(r)?;
    let empty = FlowState::zeros(spec.num_routes());
    let runs: Vec<SscMetrics> = (0..replicas)
        .into_par_iter()
        .map(|k| {
            let trace = simulate_ctmc_stream(&spec, &empty, horizon * r * r, seed, k)?;
            ssc_metrics(&spec, &diffusion_scale(&trace, r))
        })
        .collect::<Result<_>>()?;
    let count = runs.len().max(1) as f64;
    Ok(SscMetrics {
        absolute: runs.iter().map(|m| m.absolute).sum::<f64>() / count,
        multiplicative: runs.iter().map(|m| m.multiplicative).sum::<f64>() / count,
    })
}

/// Law of `Σ_k X_k` for independent `X_k ~ Exp(rate_k)`, tabulated on a
/// grid. Each added term solves `H' = λ (F − H)` with `F` the law so far,
/// stepped exactly for piecewise-linear `F`.
#[derive(Debug, Clone)]
pub struct ExponentialSum {
    rates: Vec<f64>,
    step: f64,
    table: Vec<f64>,
}

const SUM_GRID: usize = 100_000;

impl ExponentialSum {
    pub fn new(rates: &[f64]) -> Self {
        assert!(!rates.is_empty() && rates.iter().all(|&l| l > 0.0), "rates must be positive");
        let rates = rates.to_vec();
        if rates.len() == 1 {
            return ExponentialSum { rates, step: 0.0, table: Vec::new() };
        }
        // Each term exceeds 30/λ with probability e^{−30}.
        let span: f64 = rates.iter().map(|l| 30.0 / l).sum();
        let step = span / SUM_GRID as f64;
        let mut f = vec![1.0; SUM_GRID + 1];
        for &lambda in &rates {
            let a = lambda * step;
            let e = (-a).exp();
            let slope_weight = 1.0 - (-a).exp_m1().abs() / a;
            let mut h = vec![0.0; SUM_GRID + 1];
            for k in 0..SUM_GRID {
                h[k + 1] = e * h[k] + (1.0 - e) * f[k] + (f[k + 1] - f[k]) * slope_weight;
            }
            f = h;
        }
        ExponentialSum { rates, step, table: f }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if self.table.is_empty() {
            return -(-self.rates[0] * x).exp_m1();
        }
        let pos = x / self.step;
        let k = pos.floor() as usize;
        if k >= SUM_GRID {
            return 1.0;
        }
        let t = pos - k as f64;
        (self.table[k] * (1.0 - t) + self.table[k + 1] * t).clamp(0.0, 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.rates.iter().map(|l| 1.0 / l).sum()
    }
}

/// Limit data of the diffusion approximation (α = 1).
#[derive(Debug, Clone, Serialize)]
pub struct SrbmData {
    /// `2 A M⁻¹ diag(ν) M⁻¹ Aᵀ`.
    #[serde(rename = "Gamma")]
    pub gamma: Vec<Vec<f64>>,
    /// `2 Γ⁻¹ θ`.
    pub v: Vec<f64>,
    /// Sign `s` with stationary density `∝ exp(s⟨v, w⟩)` on the cone.
    pub density_sign: f64,
    /// Columns generate the workload cone: `W = {G q : q ≥ 0}`,
    /// `G = A diag(ρ/(μκ)) Aᵀ`.
    pub cone_generators: Vec<Vec<f64>>,
    /// Under the stationary law `w = G q` with independent `q_j ~ Exp(rate_j)`.
    pub q_rates: Vec<f64>,
    /// Integral of the unnormalized density over the cone, by quadrature.
    pub normalization: f64,
    /// The same integral in closed form, `|det G| / Π rate_j`.
    pub normalization_analytic: f64,
    #[serde(skip)]
    rho_over_kappa: Vec<f64>,
    #[serde(skip)]
    route_links: Vec<Vec<usize>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// Simpson's rule for `∫_0^X e^{−λq} dq` with the density cut at 1e−12.
fn truncated_exponential_integral(lambda: f64) -> f64 {
    let x = (1e12f64).ln() / lambda;
    let n = 4000;
    let h = x / n as f64;
    let f = |q: f64| (-lambda * q).exp();
    let mut total = f(0.0) + f(x);
    for k in 1..n {
        total += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
    }
    total * h / 3.0
}

pub fn srbm_data(family: &HeavyTrafficFamily) -> Result<SrbmData> {
    let spec = family.critical_spec();
    if spec.alpha() != 1.0 {
        return Err(Error::Precondition(format!("diffusion limit data needs alpha = 1, got {}", spec.alpha())));
    }
    let (links, routes) = (spec.num_links(), spec.num_routes());
    let a = DMatrix::from_fn(links, routes, |j, i| if spec.uses(j, i) { 1.0 } else { 0.0 });
    let (nu, mu, kappa) = (spec.arrival_rates(), spec.service_rates(), spec.kappa());
    let rho = spec.rho();
    let noise = DMatrix::from_diagonal(&DVector::from_fn(routes, |i, _| nu[i] / (mu[i] * mu[i])));
    let gamma = (&a * noise * a.transpose()) * 2.0;
    let theta = DVector::from_column_slice(family.theta());
    let chol = gamma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Precondition("covariance matrix is not positive definite".into()))?;
    let v = chol.solve(&theta) * 2.0;
    let spread = DMatrix::from_diagonal(&DVector::from_fn(routes, |i, _| rho[i] / (mu[i] * kappa[i])));
    let g = &a * spread * a.transpose();

    // Density exp(s⟨v, Gq⟩) in cone coordinates; integrable iff every
    // exponent s(Gv)_j is negative.
    let gv = &g * &v;
    let sign = if gv.iter().all(|&x| x > 0.0) {
        -1.0
    } else if gv.iter().all(|&x| x < 0.0) {
        1.0
    } else {
        return Err(Error::NotNormalizable);
    };
    let q_rates: Vec<f64> = gv.iter().map(|x| -sign * x).collect();
    let det = g.determinant().abs();
    let normalization = det * q_rates.iter().map(|&l| truncated_exponential_integral(l)).product::<f64>();
    let normalization_analytic = det / q_rates.iter().product::<f64>();
    Ok(SrbmData {
        gamma: to_rows(&gamma),
        v: v.iter().copied().collect(),
        density_sign: sign,
        cone_generators: to_rows(&g),
        q_rates,
        normalization,
        normalization_analytic,
        rho_over_kappa: (0..routes).map(|i| rho[i] / kappa[i]).collect(),
        route_links: (0..routes).map(|i| spec.route_links(i).to_vec()).collect(),
    })
}

impl SrbmData {
    /// Stationary law of workload coordinate `j`.
    pub fn workload_marginal(&self, j: usize) -> ExponentialSum {
        let rates: Vec<f64> = self.cone_generators[j]
            .iter()
            .zip(&self.q_rates)
            .filter(|(g, _)| **g > 0.0)
            .map(|(g, l)| l / g)
            .collect();
        ExponentialSum::new(&rates)
    }

    /// Law of route `i` of the lifted stationary workload,
    /// `Δ(Gq)_i = (ρ_i/κ_i) Σ_{j∈i} q_j`.
    pub fn route_marginal(&self, i: usize) -> ExponentialSum {
        let rates: Vec<f64> = self.route_links[i].iter().map(|&j| self.q_rates[j] / self.rho_over_kappa[i]).collect();
        ExponentialSum::new(&rates)
    }
}

/// Kolmogorov-Smirnov distance between a discrete law (atoms with masses)
/// and a continuous distribution function.
pub fn ks_discrete(atoms: &[(f64, f64)], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = atoms.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut below = 0.0;
    let mut worst: f64 = 0.0;
    let mut k = 0;
    while k < sorted.len() {
        let x = sorted[k].0;
        let mut mass = 0.0;
        while k < sorted.len() && sorted[k].0 == x {
            mass += sorted[k].1;
            k += 1;
        }
        let f = cdf(x);
        worst = worst.max((below - f).abs()).max((below + mass - f).abs());
        below += mass;
    }
    worst
}

/// `inf {x : P(X ≤ x) ≥ q}` for a discrete law.
pub fn discrete_quantile(atoms: &[(f64, f64)], q: f64) -> f64 {
    let mut sorted = atoms.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = sorted.iter().map(|a| a.1).sum();
    let mut acc = 0.0;
    for (x, p) in &sorted {
        acc += p / total;
        if acc >= q - 1e-15 {
            return *x;
        }
    }
    sorted.last().map_or(0.0, |a| a.0)
}

fn stationary_for(
    family: &HeavyTrafficFamily,
    r: f64,
    per_r_budget: u64,
    seed: u64,
    stream: u64,
) -> Result<(NetworkSpec, StationaryEstimate)> {
    let spec = family.member(r)?;
    let cap = family.cap_for(r);
    let states = (cap as f64 + 1.0).powi(spec.num_routes() as i32);
    let law = if states <= EXACT_STATE_BUDGET as f64 {
        exact_stationary(&spec, cap)?
    } else {
        estimate_stationary_stream(&spec, per_r_budget / 10, per_r_budget, seed, stream)?
    };
    Ok((spec, law))
}

fn scaled_atoms(law: &StationaryEstimate, f: impl Fn(&[f64]) -> f64, r: f64) -> Vec<(f64, f64)> {
    law.support
        .iter()
        .zip(&law.probabilities)
        .map(|(s, &p)| (f(&s.to_real()) / r, p))
        .collect()
}

/// Quantile levels reported per index.
pub const QUANTILE_LEVELS: [f64; 3] = [0.5, 0.9, 0.99];

#[derive(Debug, Clone, Serialize)]
pub struct InterchangeEntry {
    pub r: f64,
    pub gap: f64,
    pub method: StationaryMethod,
    pub truncation_or_samples: u64,
    /// KS distance of each scaled workload coordinate to its limit law.
    pub ks_per_link: Vec<f64>,
    /// KS distance of each scaled route count to the lifted limit law.
    pub ks_per_route: Vec<f64>,
    /// `E‖N̂ − Δ(Ŵ)‖∞` under the stationary law.
    pub ssc_abs: f64,
    /// `ssc_abs / E‖N̂‖∞`.
    pub ssc_mult: f64,
    /// `(level, quantile of ‖N̂‖∞)`.
    pub quantiles: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InterchangeReport {
    pub srbm: SrbmData,
    pub entries: Vec<InterchangeEntry>,
}

fn check_interchange_preconditions(spec: &NetworkSpec) -> Result<()> {
    if spec.alpha() != 1.0 || spec.kappa().iter().any(|&k| k != 1.0) {
        return Err(Error::Precondition("interchange experiment needs alpha = 1 and unit weights".into()));
    }
    if !local_traffic_holds(spec) {
        return Err(Error::Precondition("interchange experiment needs a local route on every link".into()));
    }
    Ok(())
}

/// Compares the scaled stationary law of each member with the diffusion
/// limit's product-form law. Members are processed in parallel; entries come
/// back in `r_list` order.
pub fn interchange_experiment(
    family: &HeavyTrafficFamily,
    r_list: &[f64],
    per_r_budget: u64,
    seed: u64,
) -> Result<InterchangeReport> {
    check_interchange_preconditions(family.critical_spec())?;
    let srbm = srbm_data(family)?;
    let links = family.critical_spec().num_links();
    let routes = family.critical_spec().num_routes();
    let link_laws: Vec<ExponentialSum> = (0..links).map(|j| srbm.workload_marginal(j)).collect();
    let route_laws: Vec<ExponentialSum> = (0..routes).map(|i| srbm.route_marginal(i)).collect();

    let entries = r_list
        .par_iter()
        .enumerate()
        .map(|(k, &r)| {
            let (spec, law) = stationary_for(family, r, per_r_budget, seed, k as u64)?;
            let ks_per_link = (0..links)
                .map(|j| ks_discrete(&scaled_atoms(&law, |n| workload(&spec, n)[j], r), |x| link_laws[j].cdf(x)))
                .collect();
            let ks_per_route = (0..routes)
                .map(|i| ks_discrete(&scaled_atoms(&law, |n| n[i], r), |x| route_laws[i].cdf(x)))
                .collect();

            let collapse: Vec<(f64, f64)> = law
                .support
                .par_iter()
                .zip(&law.probabilities)
                .map(|(s, &p)| {
                    if p < NEGLIGIBLE_MASS {
                        return Ok((0.0, 0.0));
                    }
                    let n = s.to_real();
                    let lifted = lift(&spec, &workload(&spec, &n))?;
                    let size = n.iter().cloned().fold(0.0, f64::max);
                    Ok((p * sup_norm_diff(&n, &lifted) / r, p * size / r))
                })
                .collect::<Result<_>>()?;
            let ssc_abs: f64 = collapse.iter().map(|c| c.0).sum();
            let mean_size: f64 = collapse.iter().map(|c| c.1).sum();

            let norms = scaled_atoms(&law, |n| n.iter().cloned().fold(0.0, f64::max), r);
            Ok(InterchangeEntry {
                r,
                gap: load_profile(&spec)?.gap,
                method: law.method,
                truncation_or_samples: law.truncation_or_samples,
                ks_per_link,
                ks_per_route,
                ssc_abs,
                ssc_mult: ssc_abs / mean_size.max(SSC_FLOOR),
                quantiles: QUANTILE_LEVELS.iter().map(|&q| (q, discrete_quantile(&norms, q))).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterchangeReport { srbm, entries })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TightnessPoint {
    pub r: f64,
    /// `q`-quantile of `‖N̂ʳ‖∞` under the stationary law.
    pub quantile: f64,
    /// Scaled `‖N‖∞` threshold at which the exponential tail bound of member
    /// `r` drops to `1 − q`.
    pub envelope: f64,
}

pub fn tightness_diagnostic(
    family: &HeavyTrafficFamily,
    r_list: &[f64],
    q: f64,
    per_r_budget: u64,
    seed: u64,
) -> Result<Vec<TightnessPoint>> {
    if family.critical_spec().alpha() != 1.0 {
        return Err(Error::Precondition("tightness diagnostic needs alpha = 1".into()));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Precondition(format!("quantile level must lie in [0, 1), got {q}")));
    }
    r_list
        .par_iter()
        .enumerate()
        .map(|(k, &r)| {
            let (spec, law) = stationary_for(family, r, per_r_budget, seed, k as u64)?;
            let norms = scaled_atoms(&law, |n| n.iter().cloned().fold(0.0, f64::max), r);
            let constants = compute_constants(&spec)?;
            let ratio = tail_bound(&constants, 0).bound;
            // Smallest ℓ with ratio^{ℓ+1} ≤ 1 − q.
            let level = ((1.0 - q).ln() / ratio.ln() - 1.0).ceil().max(0.0) as u32;
            Ok(TightnessPoint {
                r,
                quantile: discrete_quantile(&norms, q),
                envelope: tail_bound(&constants, level).norm_threshold / r,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_route_family() -> HeavyTrafficFamily {
        let critical = NetworkSpec::single_link(1.0, vec![1.0, 1.0], 1.0, vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        HeavyTrafficFamily::with_direction(critical, vec![0.5, 0.5], vec![1.0]).unwrap()
    }

    fn single_route_family(mu: f64) -> HeavyTrafficFamily {
        let critical = NetworkSpec::single_link(1.0, vec![1.0], 1.0, vec![mu], vec![mu]).unwrap();
        HeavyTrafficFamily::new(critical, vec![1.0]).unwrap()
    }

    /// Two links, each with a local route, plus a route over both.
    fn line_family() -> HeavyTrafficFamily {
        let critical = NetworkSpec::new(
            vec![vec![1, 1, 0], vec![1, 0, 1]],
            vec![1.0, 2.0],
            vec![1.0, 1.0, 1.0],
            1.0,
            vec![0.3, 0.7, 1.7],
            vec![1.0, 1.0, 1.0],
        )
        .unwrap();
        HeavyTrafficFamily::new(critical, vec![0.5, 1.0]).unwrap()
    }

    #[test]
    fn member_example() {
        let fam = two_route_family();
        let spec = fam.member(10.0).unwrap();
        assert!((spec.arrival_rates()[0] - 0.45).abs() < 1e-15);
        assert!((load_profile(&spec).unwrap().gap - 1.0 / 9.0).abs() < 1e-12);
        assert!(fam.member(1.0).is_err());
        let critical = fam.critical_spec().clone();
        assert!(HeavyTrafficFamily::with_direction(critical, vec![0.5, 0.4], vec![1.0]).is_err());
    }

    #[test]
    fn nnls_direction_solves_constraint() {
        let fam = line_family();
        let ad = fam.critical_spec().link_totals(fam.direction());
        assert!((ad[0] - 0.5).abs() < 1e-12 && (ad[1] - 1.0).abs() < 1e-12);
        assert!((fam.family_constant() - 0.5).abs() < 1e-15);
        assert_eq!(fam.cap_for(5.0), 120);
    }

    #[test]
    fn scaling_examples() {
        let trace = Trace { times: vec![0.0, 100.0], states: vec![vec![0.0], vec![1.0]], horizon: 200.0 };
        let same = diffusion_scale(&trace, 1.0);
        assert_eq!(same.times, trace.times);
        assert_eq!(same.states, trace.states);
        let scaled = diffusion_scale(&trace, 10.0);
        assert_eq!(scaled.times, vec![0.0, 1.0]);
        assert_eq!(scaled.states[1], vec![0.1]);
        assert_eq!(scaled.horizon, 2.0);
        assert_eq!(fluid_scale(&trace, 10.0).times[1], 10.0);
    }

    #[test]
    fn single_route_has_no_collapse_gap() {
        let fam = single_route_family(1.0);
        let m = ssc_path_experiment(&fam, 5.0, 3, 1.0, 7).unwrap();
        assert!(m.absolute < 1e-9 && m.multiplicative < 1e-9);
    }

    #[test]
    fn pinned_trace_has_no_collapse_gap() {
        let fam = line_family();
        let spec = fam.member(10.0).unwrap();
        let states: Vec<Vec<f64>> = [[1.0, 0.5], [0.2, 0.0], [0.0, 0.0]]
            .iter()
            .map(|w| lift(&spec, w).unwrap())
            .collect();
        let trace = Trace { times: vec![0.0, 1.0, 2.0], states, horizon: 3.0 };
        assert!(ssc_metrics(&spec, &trace).unwrap().absolute < 1e-8);
    }

    #[test]
    fn srbm_examples() {
        let srbm = srbm_data(&two_route_family()).unwrap();
        assert!((srbm.gamma[0][0] - 2.0).abs() < 1e-15);
        assert!((srbm.v[0] - 1.0).abs() < 1e-15);
        assert_eq!(srbm.density_sign, -1.0);
        let law = srbm.workload_marginal(0);
        for x in [0.1, 1.0, 3.0] {
            assert!((law.cdf(x) - (1.0 - (-x).exp())).abs() < 1e-14);
        }
    }

    #[test]
    fn gamma_recomputed_entrywise() {
        let fam = line_family();
        let srbm = srbm_data(&fam).unwrap();
        let spec = fam.critical_spec();
        for j in 0..2 {
            for k in 0..2 {
                let direct: f64 = (0..3)
                    .filter(|&i| spec.uses(j, i) && spec.uses(k, i))
                    .map(|i| 2.0 * spec.arrival_rates()[i] / spec.service_rates()[i].powi(2))
                    .sum();
                assert!((srbm.gamma[j][k] - direct).abs() < 1e-14);
            }
        }
        assert_eq!(srbm.gamma[0][1], srbm.gamma[1][0]);
        let det = srbm.gamma[0][0] * srbm.gamma[1][1] - srbm.gamma[0][1] * srbm.gamma[1][0];
        assert!(srbm.gamma[0][0] > 0.0 && det > 0.0);
        // Unit weights: the cone coordinates are Exp(θ_j).
        assert!((srbm.q_rates[0] - 0.5).abs() < 1e-12 && (srbm.q_rates[1] - 1.0).abs() < 1e-12);
        assert!((srbm.normalization / srbm.normalization_analytic - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lifted_cone_points_match_route_formula() {
        let fam = line_family();
        let srbm = srbm_data(&fam).unwrap();
        let spec = fam.critical_spec();
        for q in [[1.0, 0.0], [0.3, 2.0], [0.0, 0.7]] {
            let w: Vec<f64> = (0..2).map(|j| (0..2).map(|k| srbm.cone_generators[j][k] * q[k]).sum()).collect();
            let n = lift(spec, &w).unwrap();
            for i in 0..3 {
                let expected: f64 = spec.route_links(i).iter().map(|&j| srbm.rho_over_kappa[i] * q[j]).sum();
                assert!((n[i] - expected).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn exponential_sum_closed_forms() {
        let (a, b) = (0.7, 2.0);
        let law = ExponentialSum::new(&[a, b]);
        let erlang = ExponentialSum::new(&[a, a]);
        for x in [0.05, 0.5, 1.0, 4.0, 20.0] {
            let distinct = 1.0 - (b * (-a * x).exp() - a * (-b * x).exp()) / (b - a);
            assert!((law.cdf(x) - distinct).abs() < 1e-7, "{x}");
            let gamma2 = 1.0 - (-a * x).exp() * (1.0 + a * x);
            assert!((erlang.cdf(x) - gamma2).abs() < 1e-7, "{x}");
        }
        assert!((law.mean() - (1.0 / a + 1.0 / b)).abs() < 1e-15);
    }

    #[test]
    fn ks_and_quantile_examples() {
        let atoms = [(0.0, 0.5), (1.0, 0.5)];
        assert!((ks_discrete(&atoms, |x| x.clamp(0.0, 1.0)) - 0.5).abs() < 1e-15);
        assert_eq!(discrete_quantile(&atoms, 0.0), 0.0);
        assert_eq!(discrete_quantile(&atoms, 0.7), 1.0);
    }

    #[test]
    fn single_route_limit_is_exponential() {
        // Scaled geometric with ratio 1 − θ/(Cr) against Exp(θ/C); the
        // workload divides by μ, so its limit rate is θμ/C.
        let mu = 2.0;
        let fam = single_route_family(mu);
        let report = interchange_experiment(&fam, &[50.0], 0, 1).unwrap();
        let entry = &report.entries[0];
        assert_eq!(entry.method, StationaryMethod::ExactTruncated);
        assert!(entry.ks_per_route[0] <= 0.05);
        assert!(entry.ks_per_link[0] <= 0.05);
        assert!((report.srbm.v[0] - mu).abs() < 1e-12);
        let spec = fam.member(50.0).unwrap();
        let law = exact_stationary(&spec, fam.cap_for(50.0)).unwrap();
        let atoms = scaled_atoms(&law, |n| n[0], 50.0);
        assert!(ks_discrete(&atoms, |x| 1.0 - (-x).exp()) <= 0.05);
        assert!(entry.ssc_abs < 1e-9);
    }

    #[test]
    fn empty_r_list_gives_empty_report() {
        let report = interchange_experiment(&two_route_family(), &[], 1000, 1).unwrap();
        assert!(report.entries.is_empty());
        let tight = tightness_diagnostic(&two_route_family(), &[], 0.9, 1000, 1).unwrap();
        assert!(tight.is_empty());
    }

    #[test]
    fn tightness_quantiles_are_enveloped() {
        let fam = single_route_family(1.0);
        let mut prev = -1.0;
        for q in [0.0, 0.5, 0.9, 0.99] {
            let pts = tightness_diagnostic(&fam, &[5.0, 10.0], q, 0, 1).unwrap();
            if q == 0.0 {
                assert_eq!(pts[0].quantile, 0.0);
            }
            assert!(pts[0].quantile >= prev);
            prev = pts[0].quantile;
            for p in pts {
                assert!(p.quantile <= p.envelope);
            }
        }
    }

    #[test]
    fn preconditions() {
        let critical = NetworkSpec::single_link(1.0, vec![1.0, 2.0], 1.0, vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        let fam = HeavyTrafficFamily::new(critical, vec![1.0]).unwrap();
        assert!(interchange_experiment(&fam, &[5.0], 10, 1).is_err());
        let under = NetworkSpec::single_link(1.0, vec![1.0], 1.0, vec![0.5], vec![1.0]).unwrap();
        assert!(HeavyTrafficFamily::new(under, vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn gap_times_r_meets_family_constant(r in 3.0f64..500.0) {
            let fam = line_family();
            let spec = fam.member(r).unwrap();
            let load = spec.link_totals(&spec.rho());
            for j in 0..2 {
                let slack = r * (spec.capacity()[j] - load[j]);
                prop_assert!((slack - fam.theta()[j]).abs() < 1e-9);
            }
            prop_assert!(load_profile(&spec).unwrap().gap * r >= fam.family_constant() - 1e-9);
        }
    }
}
