//! Lyapunov functions for the flow-count process and the bounds built on
//! them.
//!
//! `F` is the weighted power function `(1/(α+1)) Σ w_i n_i^{α+1}` with
//! `w_i = κ_i μ_i^{α−1} ν_i^{−α}`. `L` is a normed version, made C² at the
//! origin for α < 1 by splicing a cubic into `r^α` on `[0, 1)`.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::allocator::{allocate, FlowState};
use crate::error::{Error, Result};
use crate::model::{load_profile, uniformization_rate, NetworkSpec};
use crate::simulator::replica_rng;

/// Lyapunov weights `w_i = κ_i μ_i^{α−1} ν_i^{−α}`.
pub fn lyapunov_weights(spec: &NetworkSpec) -> Vec<f64> {
    let a = spec.alpha();
    (0..spec.num_routes())
        .map(|i| spec.kappa()[i] * spec.service_rates()[i].powf(a - 1.0) * spec.arrival_rates()[i].powf(-a))
        .collect()
}

pub fn f_alpha(spec: &NetworkSpec, n: &[f64]) -> f64 {
    let a = spec.alpha();
    lyapunov_weights(spec)
        .iter()
        .zip(n)
        .map(|(w, x)| w * x.powf(a + 1.0))
        .sum::<f64>()
        / (a + 1.0)
}

/// `∂F/∂n_i = w_i n_i^α`.
pub fn f_alpha_gradient(spec: &NetworkSpec, n: &[f64]) -> Vec<f64> {
    let a = spec.alpha();
    lyapunov_weights(spec).iter().zip(n).map(|(w, x)| w * x.powf(a)).collect()
}

/// `r^α`, with the cubic `(α−1)r³ + (1−α)r² + r` on `[0, 1)` when α < 1.
pub fn h_alpha(alpha: f64, r: f64) -> f64 {
    if alpha >= 1.0 || r >= 1.0 {
        r.powf(alpha)
    } else {
        (alpha - 1.0) * r.powi(3) + (1.0 - alpha) * r * r + r
    }
}

pub fn h_alpha_prime(alpha: f64, r: f64) -> f64 {
    if alpha >= 1.0 || r >= 1.0 {
        if r == 0.0 {
            return if alpha == 1.0 { 1.0 } else { 0.0 };
        }
        alpha * r.powf(alpha - 1.0)
    } else {
        3.0 * (alpha - 1.0) * r * r + 2.0 * (1.0 - alpha) * r + 1.0
    }
}

/// Antiderivative of [`h_alpha`] vanishing at 0.
pub fn h_alpha_integral(alpha: f64, r: f64) -> f64 {
    let cubic_part = |x: f64| (alpha - 1.0) * x.powi(4) / 4.0 + (1.0 - alpha) * x.powi(3) / 3.0 + x * x / 2.0;
    if alpha >= 1.0 {
        r.powf(alpha + 1.0) / (alpha + 1.0)
    } else if r <= 1.0 {
        cubic_part(r)
    } else {
        cubic_part(1.0) + (r.powf(alpha + 1.0) - 1.0) / (alpha + 1.0)
    }
}

/// `L(n) = [(α+1) Σ w_i H(n_i)]^{1/(α+1)}`.
pub fn l_alpha(spec: &NetworkSpec, n: &[f64]) -> f64 {
    l_alpha_weighted(spec.alpha(), &lyapunov_weights(spec), n)
}

fn l_alpha_weighted(alpha: f64, w: &[f64], n: &[f64]) -> f64 {
    let s: f64 = w.iter().zip(n).map(|(w, &x)| w * h_alpha_integral(alpha, x)).sum();
    ((alpha + 1.0) * s).powf(1.0 / (alpha + 1.0))
}

/// `∂L/∂n_i = w_i h(n_i) / L^α`; zero at the origin.
pub fn l_alpha_gradient(spec: &NetworkSpec, n: &[f64]) -> Vec<f64> {
    let a = spec.alpha();
    let w = lyapunov_weights(spec);
    let l = l_alpha_weighted(a, &w, n);
    if l == 0.0 {
        return vec![0.0; n.len()];
    }
    w.iter().zip(n).map(|(w, &x)| w * h_alpha(a, x) / l.powf(a)).collect()
}

fn unit_step(n: &[f64], i: usize, delta: f64) -> Vec<f64> {
    let mut m = n.to_vec();
    m[i] += delta;
    m
}

/// `(⟨∇F(n), ν − μΛ(n)⟩, −ε⟨∇F(n), ν⟩)`; the first should not exceed the
/// second.
pub fn drift_inner_products(spec: &NetworkSpec, state: &FlowState) -> Result<(f64, f64)> {
    let eps = load_profile(spec)?.gap;
    assert!(!state.is_zero(), "drift comparison needs a nonzero state");
    let n = state.to_real();
    let grad = f_alpha_gradient(spec, &n);
    let rates = allocate(spec, state)?.rates;
    let (nu, mu) = (spec.arrival_rates(), spec.service_rates());
    let lhs = (0..n.len()).map(|i| grad[i] * (nu[i] - mu[i] * rates[i])).sum();
    let rhs = -eps * (0..n.len()).map(|i| grad[i] * nu[i]).sum::<f64>();
    Ok((lhs, rhs))
}

/// Generator applied to `F`: `Σ_m q(n, n+m) [F(n+m) − F(n)]`.
pub fn generator_f(spec: &NetworkSpec, state: &FlowState) -> Result<f64> {
    load_profile(spec)?;
    let n = state.to_real();
    let rates = allocate(spec, state)?.rates;
    let f0 = f_alpha(spec, &n);
    let mut total = 0.0;
    for i in 0..n.len() {
        total += spec.arrival_rates()[i] * (f_alpha(spec, &unit_step(&n, i, 1.0)) - f0);
        if n[i] > 0.0 {
            total += spec.service_rates()[i] * rates[i] * (f_alpha(spec, &unit_step(&n, i, -1.0)) - f0);
        }
    }
    Ok(total)
}

/// One-step expected change of `L` under the uniformized chain.
pub fn expected_drift_l(spec: &NetworkSpec, state: &FlowState) -> Result<f64> {
    load_profile(spec)?;
    let rates = allocate(spec, state)?.rates;
    Ok(drift_l_with_rates(spec, &lyapunov_weights(spec), uniformization_rate(spec), state, &rates))
}

fn drift_l_with_rates(spec: &NetworkSpec, w: &[f64], xi: f64, state: &FlowState, rates: &[f64]) -> f64 {
    let a = spec.alpha();
    let n = state.to_real();
    let l0 = l_alpha_weighted(a, w, &n);
    let mut total = 0.0;
    for i in 0..n.len() {
        total += spec.arrival_rates()[i] * (l_alpha_weighted(a, w, &unit_step(&n, i, 1.0)) - l0);
        if n[i] > 0.0 {
            total += spec.service_rates()[i] * rates[i] * (l_alpha_weighted(a, w, &unit_step(&n, i, -1.0)) - l0);
        }
    }
    total / xi
}

/// Explicit constants of the drift and tail bounds for one network.
#[derive(Debug, Clone, Serialize)]
pub struct BoundConstants {
    pub eps: f64,
    #[serde(rename = "Xi")]
    pub uniformization: f64,
    #[serde(rename = "w")]
    pub weights: Vec<f64>,
    #[serde(rename = "K")]
    pub drift_constant: f64,
    #[serde(rename = "xi")]
    pub increment_bound: f64,
    /// Threshold on `L` beyond which the drift certificate holds.
    #[serde(rename = "B")]
    pub threshold: f64,
    #[serde(rename = "m")]
    pub decay_coefficient: f64,
    #[serde(rename = "M")]
    pub curvature_coefficient: f64,
    /// Bound on the generator of `F`, in units of `ε^{1−α}`.
    #[serde(rename = "Ktilde")]
    pub excursion_constant: f64,
    pub probe_set_hash: String,
    pub probe_count: usize,
    /// `L(n) ≥ norm_scale·‖n‖∞ − norm_offset`, used to restate tails in `‖n‖∞`.
    pub norm_scale: f64,
    pub norm_offset: f64,
}

/// `max_i κ_i^{1/(α+1)} μ_i^{(α−1)/(α+1)} ν_i^{1/(α+1)} / Ξ`.
pub fn drift_constant(spec: &NetworkSpec) -> f64 {
    let a = spec.alpha();
    let e = 1.0 / (a + 1.0);
    let best = (0..spec.num_routes())
        .map(|i| {
            spec.kappa()[i].powf(e) * spec.service_rates()[i].powf((a - 1.0) * e) * spec.arrival_rates()[i].powf(e)
        })
        .fold(0.0, f64::max);
    best / uniformization_rate(spec)
}

/// `max_i w_i^{1/(α+1)} + 2 (2 Σ w_i)^{1/(α+1)}`: bounds the change of `L`
/// in one transition.
pub fn increment_bound(spec: &NetworkSpec) -> f64 {
    let a = spec.alpha();
    let w = lyapunov_weights(spec);
    let e = 1.0 / (a + 1.0);
    let top = w.iter().map(|x| x.powf(e)).fold(0.0, f64::max);
    top + 2.0 * (2.0 * w.iter().sum::<f64>()).powf(e)
}

/// Coefficients `(m, M)` of the bound `QF(n) ≤ −mε Σ n_i^α + M Σ (n_i+1)^{α−1}`.
pub fn generator_coefficients(spec: &NetworkSpec) -> (f64, f64) {
    let a = spec.alpha();
    let rho = spec.rho();
    let cmax = spec.max_capacity();
    let m = (0..rho.len()).map(|i| spec.kappa()[i] * rho[i].powf(1.0 - a)).fold(f64::INFINITY, f64::min);
    let big = (0..rho.len())
        .map(|i| spec.kappa()[i] * a / (2.0 * rho[i].powf(a)) * (rho[i] + cmax))
        .fold(0.0, f64::max);
    (m, big)
}

/// Maximum of a function unimodal on `[lo, hi]`: grid scan to bracket, then
/// golden-section refinement. Returns the larger of the refined value and
/// every scanned value.
fn maximize_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let points = 256;
    let h = (hi - lo) / points as f64;
    let (best_k, mut best) = (0..=points)
        .map(|k| (k, f(lo + k as f64 * h)))
        .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    let (mut a, mut b) = ((lo + (best_k as f64 - 1.0) * h).max(lo), (lo + (best_k as f64 + 1.0) * h).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        if b - a <= 1e-12 * (1.0 + b.abs()) {
            break;
        }
    }
    best = best.max(fc).max(fd);
    best
}

/// `K̃` with `QF(n) ≤ K̃ ε^{1−α}` for every state: the separable bound is
/// maximized coordinate by coordinate.
pub fn excursion_constant(spec: &NetworkSpec, eps: f64) -> f64 {
    let a = spec.alpha();
    let (m, big) = generator_coefficients(spec);
    let phi = |x: f64| -m * eps * x.powf(a) + big * (x + 1.0).powf(a - 1.0);
    // Past this point φ < 0 for α ≥ 1; for α < 1 φ is decreasing throughout.
    let hi = (4.0 * big * 2f64.powf((a - 1.0).max(0.0)) / (m * eps)).max(1.0);
    let per_route = maximize_1d(phi, 0.0, hi).max(phi(0.0));
    spec.num_routes() as f64 * per_route * eps.powf(a - 1.0)
}

/// Result of the numerical drift certification.
#[derive(Debug, Clone, Serialize)]
pub struct DriftCertificate {
    /// Certified threshold on `L`.
    pub threshold: f64,
    /// Drift target `−εK/2`.
    pub target: f64,
    /// Largest drift seen among the probes (at most `target`).
    pub worst_drift: f64,
    pub probes: Vec<FlowState>,
    pub probe_set_hash: String,
}

/// Seed for the random part of probe sets. Fixed so certificates reproduce.
const PROBE_SEED: u64 = 0x5eed_0f_d71f7;
const MAX_DOUBLINGS: u32 = 48;

/// Integer states with `L` in `(lo, hi]`: points along each axis and next to
/// it, along the diagonal of every face (all faces when there are at most
/// six routes) and along the load direction, plus seeded random directions.
pub fn probe_shell(spec: &NetworkSpec, lo: f64, hi: f64, stream: u64) -> Vec<FlowState> {
    let routes = spec.num_routes();
    let a = spec.alpha();
    let w = lyapunov_weights(spec);
    let l_of = |n: &[u32]| l_alpha_weighted(a, &w, &n.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let mut out: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut keep = |n: Vec<u32>, out: &mut BTreeSet<Vec<u32>>| {
        let l = l_of(&n);
        if l > lo && l <= hi {
            out.insert(n);
        }
    };

    // Samples a ray n(x) = round(x·dir) at scales spread over the shell.
    let ray = |dir: &[f64], samples: usize, out: &mut BTreeSet<Vec<u32>>, keep: &mut dyn FnMut(Vec<u32>, &mut BTreeSet<Vec<u32>>)| {
        let at = |x: f64| -> Vec<u32> { dir.iter().map(|d| (x * d).round().max(0.0) as u32).collect() };
        let lreal = |x: f64| l_alpha_weighted(a, &w, &dir.iter().map(|d| x * d).collect::<Vec<_>>());
        // L along the ray is increasing; bracket the shell by bisection.
        let solve = |target: f64| {
            let (mut x0, mut x1) = (0.0, 1.0);
            while lreal(x1) < target {
                x1 *= 2.0;
            }
            for _ in 0..100 {
                let mid = 0.5 * (x0 + x1);
                if lreal(mid) < target {
                    x0 = mid;
                } else {
                    x1 = mid;
                }
            }
            x1
        };
        let (x_lo, x_hi) = (solve(lo), solve(hi));
        for k in 0..samples {
            let t = (k as f64 + 0.5) / samples as f64;
            let x = x_lo * (x_hi / x_lo).powf(t);
            keep(at(x), out);
        }
        keep(at(x_lo).iter().map(|c| c + 1).collect(), out);
        keep(at(x_hi), out);
        keep(at(x_lo.ceil()), out);
    };

    for i in 0..routes {
        let mut dir = vec![0.0; routes];
        dir[i] = 1.0;
        ray(&dir, 16, &mut out, &mut keep);
        for k in (0..routes).filter(|&k| k != i) {
            let near: Vec<Vec<u32>> = out
                .iter()
                .filter(|n| n[i] > 0 && n.iter().enumerate().all(|(j, &c)| j == i || c == 0))
                .cloned()
                .collect();
            for mut n in near {
                n[k] = 1;
                keep(n, &mut out);
            }
        }
    }
    if routes <= 6 {
        for mask in 1u32..(1 << routes) {
            if mask.count_ones() < 2 {
                continue;
            }
            let dir: Vec<f64> = (0..routes).map(|i| ((mask >> i) & 1) as f64).collect();
            ray(&dir, 8, &mut out, &mut keep);
        }
    }
    let rho = spec.rho();
    let rmax = rho.iter().cloned().fold(0.0, f64::max);
    ray(&rho.iter().map(|r| r / rmax).collect::<Vec<_>>(), 8, &mut out, &mut keep);

    let mut rng = replica_rng(PROBE_SEED, stream);
    for _ in 0..48 * routes {
        let dir: Vec<f64> = (0..routes)
            .map(|_| if rng.gen::<f64>() < 0.25 { 0.0 } else { rng.gen::<f64>() })
            .collect();
        if dir.iter().all(|&d| d == 0.0) {
            continue;
        }
        ray(&dir, 2, &mut out, &mut keep);
    }
    out.into_iter().map(FlowState::new).collect()
}

fn hash_probes(probes: &[FlowState]) -> String {
    let mut h = Sha256::new();
    for p in probes {
        for c in p.counts() {
            h.update(c.to_le_bytes());
        }
        h.update([0xff]);
    }
    hex::encode(h.finalize())
}

/// Smallest threshold `B` on a doubling grid such that every probe with `L`
/// in `(B, 100B]` has drift at most `−εK/2`.
pub fn certify_drift_threshold(spec: &NetworkSpec) -> Result<DriftCertificate> {
    let eps = load_profile(spec)?.gap;
    let target = -eps * drift_constant(spec) / 2.0;
    let w = lyapunov_weights(spec);
    let xi = uniformization_rate(spec);
    let a = spec.alpha();
    let unit = (0..spec.num_routes())
        .map(|i| l_alpha_weighted(a, &w, &unit_step(&vec![0.0; spec.num_routes()], i, 1.0)))
        .fold(f64::INFINITY, f64::min);
    let b0 = unit / 2.0;
    for k in 0..MAX_DOUBLINGS {
        let b = b0 * 2f64.powi(k as i32);
        let mut probes = probe_shell(spec, b, 10.0 * b, 2 * k as u64);
        probes.extend(probe_shell(spec, 10.0 * b, 100.0 * b, 2 * k as u64 + 1));
        let drifts: Vec<f64> = probes
            .par_iter()
            .map(|s| Ok(drift_l_with_rates(spec, &w, xi, s, &allocate(spec, s)?.rates)))
            .collect::<Result<_>>()?;
        let worst = drifts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if worst <= target {
            let probe_set_hash = hash_probes(&probes);
            return Ok(DriftCertificate { threshold: b, target, worst_drift: worst, probes, probe_set_hash });
        }
    }
    Err(Error::DriftNotCertified { limit: b0 * 2f64.powi(MAX_DOUBLINGS as i32 - 1) })
}

/// All constants for `spec`, including the certified drift threshold.
pub fn compute_constants(spec: &NetworkSpec) -> Result<BoundConstants> {
    let eps = load_profile(spec)?.gap;
    let cert = certify_drift_threshold(spec)?;
    let (m, big) = generator_coefficients(spec);
    let w = lyapunov_weights(spec);
    let a = spec.alpha();
    let e = 1.0 / (a + 1.0);
    let norm_scale = w.iter().map(|x| x.powf(e)).fold(f64::INFINITY, f64::min);
    let norm_offset = if a >= 1.0 { 0.0 } else { (2.0 * w.iter().sum::<f64>()).powf(e) };
    Ok(BoundConstants {
        eps,
        uniformization: uniformization_rate(spec),
        weights: w,
        drift_constant: drift_constant(spec),
        increment_bound: increment_bound(spec),
        threshold: cert.threshold,
        decay_coefficient: m,
        curvature_coefficient: big,
        excursion_constant: excursion_constant(spec, eps),
        probe_set_hash: cert.probe_set_hash,
        probe_count: cert.probes.len(),
        norm_scale,
        norm_offset,
    })
}

/// Tail bound at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailBound {
    pub level: u32,
    /// `B + 2ξℓ`, a threshold on `L`.
    pub threshold: f64,
    /// The same event restated for `‖N‖∞`:
    /// `(B + 2ξℓ + norm_offset) / norm_scale`.
    pub norm_threshold: f64,
    /// `(ξ/(ξ+εK))^{ℓ+1}`.
    pub bound: f64,
}

pub fn tail_bound(c: &BoundConstants, level: u32) -> TailBound {
    let xi = c.increment_bound;
    let threshold = c.threshold + 2.0 * xi * level as f64;
    let ratio = xi / (xi + c.eps * c.drift_constant);
    TailBound {
        level,
        threshold,
        norm_threshold: (threshold + c.norm_offset) / c.norm_scale,
        bound: ratio.powi(level as i32 + 1).clamp(0.0, 1.0),
    }
}

/// Bound on `P(sup_{t≤T} ‖N(t)‖∞ ≥ b)` started from the empty network.
pub fn maximal_bound(spec: &NetworkSpec, c: &BoundConstants, horizon: f64, b: f64) -> Result<f64> {
    let a = spec.alpha();
    if a < 1.0 {
        return Err(Error::Precondition(format!("maximal excursion bound needs alpha >= 1, got {a}")));
    }
    if !(horizon > 0.0 && b > 0.0) {
        return Err(Error::Precondition("horizon and level must be positive".into()));
    }
    let wmin = c.weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let k_max = (a + 1.0) * c.excursion_constant / wmin;
    Ok((k_max * horizon / (c.eps.powf(a - 1.0) * b.powf(a + 1.0))).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mm1(alpha: f64) -> NetworkSpec {
        NetworkSpec::single_link(1.0, vec![1.0], alpha, vec![0.8], vec![1.0]).unwrap()
    }

    fn two_route(alpha: f64) -> NetworkSpec {
        NetworkSpec::single_link(1.0, vec![1.0, 1.0], alpha, vec![0.4, 0.4], vec![1.0, 1.0]).unwrap()
    }

    fn line(alpha: f64) -> NetworkSpec {
        NetworkSpec::new(
            vec![vec![1, 1, 0], vec![1, 0, 1]],
            vec![1.0, 1.5],
            vec![1.0, 2.0, 1.0],
            alpha,
            vec![0.2, 0.3, 0.6],
            vec![1.0, 0.5, 2.0],
        )
        .unwrap()
    }

    #[test]
    fn f_examples() {
        let spec = NetworkSpec::single_link(10.0, vec![1.0, 1.0], 1.0, vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert!((f_alpha(&spec, &[2.0, 2.0]) - 3.0).abs() < 1e-14);
        assert_eq!(f_alpha(&spec, &[0.0, 0.0]), 0.0);
        assert!((f_alpha(&spec, &[4.0, 2.0]) - 4.0 * f_alpha(&spec, &[2.0, 1.0])).abs() < 1e-12);
    }

    #[test]
    fn h_examples() {
        for a in [0.1, 0.5, 0.9, 1.0, 2.0] {
            assert_eq!(h_alpha(a, 0.0), 0.0);
            assert!((h_alpha(a, 1.0) - 1.0).abs() < 1e-15);
        }
        assert!((h_alpha(0.5, 4.0) - 2.0).abs() < 1e-15);
        assert!((h_alpha(0.5, 0.5) - 0.5625).abs() < 1e-15);
        // The splice is C¹ at 1.
        assert!((h_alpha_prime(0.5, 1.0 - 1e-12) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn h_integral_matches_quadrature() {
        for a in [0.1, 0.5, 0.9, 1.5] {
            for r in [0.3, 1.0, 2.7] {
                let steps = 20_000;
                let h = r / steps as f64;
                let simpson: f64 = (0..steps)
                    .map(|k| {
                        let x = k as f64 * h;
                        h / 6.0 * (h_alpha(a, x) + 4.0 * h_alpha(a, x + h / 2.0) + h_alpha(a, x + h))
                    })
                    .sum();
                assert!((simpson - h_alpha_integral(a, r)).abs() < 1e-9, "{a} {r}");
            }
        }
    }

    #[test]
    fn l_examples() {
        assert!((l_alpha(&mm1(1.0), &[5.0]) - 5.590169943749474).abs() < 1e-12);
        assert_eq!(l_alpha(&mm1(1.0), &[0.0]), 0.0);
    }

    #[test]
    fn inner_product_examples() {
        let (lhs, rhs) = drift_inner_products(&mm1(1.0), &FlowState::new(vec![5])).unwrap();
        assert!((lhs + 1.25).abs() < 1e-12 && (rhs + 1.25).abs() < 1e-12);
        // Symmetric load and state: each route gets C/2 and both sides are
        // −2w(C/2 − ν), so the inequality is tight.
        let (lhs, rhs) = drift_inner_products(&two_route(1.0), &FlowState::new(vec![1, 1])).unwrap();
        assert!((lhs - rhs).abs() < 1e-9 && (lhs + 0.5).abs() < 1e-9);
        let (lhs, rhs) = drift_inner_products(&two_route(1.0), &FlowState::new(vec![2, 1])).unwrap();
        assert!(lhs < rhs - 0.1);
        for spec in [two_route(0.5), line(2.0), line(0.5)] {
            for i in 0..spec.num_routes() {
                let mut e = FlowState::zeros(spec.num_routes());
                e.counts_mut()[i] = 1;
                let (lhs, rhs) = drift_inner_products(&spec, &e).unwrap();
                assert!(lhs <= rhs + 1e-7);
            }
        }
    }

    #[test]
    fn generator_examples() {
        let qf = generator_f(&mm1(1.0), &FlowState::new(vec![0])).unwrap();
        assert!((qf - 0.5).abs() < 1e-14);
        assert!(generator_f(&line(1.0), &FlowState::new(vec![40, 40, 40])).unwrap() < 0.0);
    }

    #[test]
    fn generator_is_uniformized_drift() {
        // Enumerate the uniformized kernel directly, self-loop included.
        for spec in [two_route(0.5), line(2.0)] {
            let xi = uniformization_rate(&spec);
            for counts in [vec![0, 0], vec![3, 1], vec![0, 7]] {
                let mut counts = counts;
                counts.resize(spec.num_routes(), 2);
                let s = FlowState::new(counts);
                let n = s.to_real();
                let rates = allocate(&spec, &s).unwrap().rates;
                let mut expected = 0.0;
                let mut moved = 0.0;
                for i in 0..n.len() {
                    let p_up = spec.arrival_rates()[i] / xi;
                    expected += p_up * f_alpha(&spec, &unit_step(&n, i, 1.0));
                    moved += p_up;
                    if n[i] > 0.0 {
                        let p_down = spec.service_rates()[i] * rates[i] / xi;
                        expected += p_down * f_alpha(&spec, &unit_step(&n, i, -1.0));
                        moved += p_down;
                    }
                }
                expected += (1.0 - moved) * f_alpha(&spec, &n);
                let drift = expected - f_alpha(&spec, &n);
                let qf = generator_f(&spec, &s).unwrap();
                assert!((drift - qf / xi).abs() <= 1e-12 * (1.0 + qf.abs()));
            }
        }
    }

    #[test]
    fn l_drift_example() {
        let d = expected_drift_l(&mm1(1.0), &FlowState::new(vec![5])).unwrap();
        assert!((d - (-0.2 * 1.25f64.sqrt() / 1.8)).abs() < 1e-12);
        assert!((d + 0.12423).abs() < 1e-5);
        assert!(expected_drift_l(&mm1(0.5), &FlowState::new(vec![0])).unwrap() > 0.0);
    }

    #[test]
    fn constant_examples() {
        let spec = mm1(1.0);
        assert!((increment_bound(&spec) - (1.25f64.sqrt() + 2.0 * 2.5f64.sqrt())).abs() < 1e-12);
        assert!((increment_bound(&spec) - 4.2803).abs() < 1e-4);
        assert!((drift_constant(&spec) - 0.8f64.sqrt() / 1.8).abs() < 1e-12);
        assert!((drift_constant(&spec) - 0.4969).abs() < 1e-4);
        let (m, _) = generator_coefficients(&spec);
        assert!((m - 1.0).abs() < 1e-15);
        let c = compute_constants(&spec).unwrap();
        assert!(c.increment_bound >= c.weights.iter().map(|w| w.sqrt()).fold(0.0, f64::max));
        assert!(c.threshold > 0.0 && c.excursion_constant > 0.0 && c.probe_count > 0);
    }

    #[test]
    fn excursion_constant_closed_forms() {
        // α = 1: φ(x) = −mεx + M, maximized at 0.
        let spec = mm1(1.0);
        let (_, big) = generator_coefficients(&spec);
        assert!((excursion_constant(&spec, 0.25) - big).abs() < 1e-12);
        // α = 2: φ(x) = −mεx² + M(x+1), maximum M²/(4mε) + M.
        let spec = two_route(2.0);
        let (m, big) = generator_coefficients(&spec);
        let eps = 0.25;
        let expected = 2.0 * (big * big / (4.0 * m * eps) + big) * eps;
        assert!((excursion_constant(&spec, eps) - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn excursion_constant_bounds_generator() {
        for spec in [mm1(1.0), two_route(2.0), line(1.0), line(1.5)] {
            let c = compute_constants(&spec).unwrap();
            let cap = c.excursion_constant * c.eps.powf(1.0 - spec.alpha());
            for a in 0..25u32 {
                for b in 0..25u32 {
                    let mut counts = vec![a, b, (a + b) / 2];
                    counts.truncate(spec.num_routes());
                    let qf = generator_f(&spec, &FlowState::new(counts)).unwrap();
                    assert!(qf <= cap + 1e-9, "QF {qf} > {cap}");
                }
            }
        }
    }

    #[test]
    fn tail_bound_shape() {
        let c = compute_constants(&two_route(1.0)).unwrap();
        let ratio = c.increment_bound / (c.increment_bound + c.eps * c.drift_constant);
        assert!((tail_bound(&c, 0).bound - ratio).abs() < 1e-15);
        for l in 0..10 {
            let (a, b) = (tail_bound(&c, l), tail_bound(&c, l + 1));
            assert!(b.bound < a.bound);
            assert!((b.bound / a.bound - ratio).abs() < 1e-12);
            assert!((b.threshold - a.threshold - 2.0 * c.increment_bound).abs() < 1e-12);
        }
        let mut near_critical = c.clone();
        near_critical.eps = 1e-12;
        assert!(tail_bound(&near_critical, 10).bound > 1.0 - 1e-9);
    }

    #[test]
    fn maximal_bound_shape() {
        let spec = mm1(1.0);
        let c = compute_constants(&spec).unwrap();
        let b1 = maximal_bound(&spec, &c, 100.0, 50.0).unwrap();
        let b2 = maximal_bound(&spec, &c, 100.0, 100.0).unwrap();
        assert!((b1 / b2 - 4.0).abs() < 1e-12);
        assert!(maximal_bound(&spec, &c, 100.0, 1e9).unwrap() < 1e-12);
        let mut other = c.clone();
        other.eps = 0.01;
        assert_eq!(maximal_bound(&spec, &other, 100.0, 50.0).unwrap(), b1);
        let low = mm1(0.5);
        assert!(maximal_bound(&low, &c, 1.0, 1.0).is_err());
    }

    #[test]
    fn certificate_is_reproducible() {
        let a = certify_drift_threshold(&two_route(1.0)).unwrap();
        let b = certify_drift_threshold(&two_route(1.0)).unwrap();
        assert_eq!(a.probe_set_hash, b.probe_set_hash);
        assert!(a.worst_drift <= a.target);
        let w = lyapunov_weights(&two_route(1.0));
        for p in &a.probes {
            let l = l_alpha_weighted(1.0, &w, &p.to_real());
            assert!(l > a.threshold && l <= 100.0 * a.threshold);
        }
    }

    #[test]
    fn splice_bounds_on_grid() {
        for a in [0.1, 0.5, 0.9] {
            let mut prev = -1.0;
            for k in 0..=500 {
                let r = k as f64 / 100.0;
                let h = h_alpha(a, r);
                assert!(h > prev);
                prev = h;
                if r <= 1.0 {
                    assert!(r.powf(a) - 1.0 <= h && h <= r.powf(a) + 1.0);
                }
                assert!(h_alpha_prime(a, r) <= 2.0);
                let big = (a + 1.0) * h_alpha_integral(a, r);
                assert!(r.powf(a + 1.0) - 2.0 <= big && big <= r.powf(a + 1.0) + 2.0);
            }
        }
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(n in proptest::collection::vec(0.2f64..6.0, 3), alpha in prop::sample::select(vec![0.3, 0.5, 1.0, 2.0])) {
            let spec = line(alpha);
            let step = 1e-5;
            for (analytic, func) in [
                (f_alpha_gradient(&spec, &n), f_alpha as fn(&NetworkSpec, &[f64]) -> f64),
                (l_alpha_gradient(&spec, &n), l_alpha as fn(&NetworkSpec, &[f64]) -> f64),
            ] {
                for i in 0..3 {
                    let fd = (func(&spec, &unit_step(&n, i, step)) - func(&spec, &unit_step(&n, i, -step))) / (2.0 * step);
                    prop_assert!((fd - analytic[i]).abs() <= 1e-6 * analytic[i].abs().max(1e-3));
                }
            }
        }

        #[test]
        fn l_tracks_power_sum(n in proptest::collection::vec(0.0f64..8.0, 3)) {
            let spec = line(0.5);
            let w = lyapunov_weights(&spec);
            let power: f64 = w.iter().zip(&n).map(|(w, x)| w * x.powf(1.5)).sum();
            let l = l_alpha(&spec, &n).powf(1.5);
            prop_assert!((l - power).abs() <= 2.0 * w.iter().sum::<f64>() + 1e-12);
        }
    }
}
