//! `afn`: runs allocation, simulation, bound and heavy-traffic experiments
//! on a network spec and writes machine-readable results.

pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use afn_core::allocator::{allocate_real, FlowState};
use afn_core::fluid::{default_step, fms_integrate, lift, manifold_distance, richardson_gap, workload};
use afn_core::heavytraffic::{
    interchange_experiment, ssc_path_experiment, tightness_diagnostic, HeavyTrafficFamily,
};
use afn_core::lyapunov::{compute_constants, drift_inner_products, expected_drift_l, maximal_bound, tail_bound};
use afn_core::model::NetworkSpec;
use afn_core::simulator::{
    estimate_stationary, exact_stationary, max_excursion, replica_rng, simulate_ctmc, Simulator,
};

use output::{Cell, Manifest, OutputDir};

/// Tolerance on the drift inequality in `drift-scan`.
pub const DRIFT_TOL: f64 = 1e-7;

#[derive(Debug, Parser)]
#[command(name = "afn", version, about = "Experiments on alpha-fair bandwidth-sharing networks")]
pub struct Cli {
    /// Directory for result files and the run manifest.
    #[arg(long, global = true, default_value = "afn-out")]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true, env = "AFN_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Bandwidth allocation at one state.
    Allocate {
        #[arg(long)]
        spec: PathBuf,
        /// Flow counts, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        state: Vec<f64>,
    },
    /// One sample path of the flow-count process.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        horizon: f64,
        #[arg(long)]
        seed: u64,
        /// Starting counts; empty network by default.
        #[arg(long, value_delimiter = ',')]
        initial: Option<Vec<u32>>,
    },
    /// Stationary law: exact on a truncated lattice (`--cap`) or by
    /// simulation (`--steps`, needs `--seed`).
    Stationary {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, conflicts_with = "steps", required_unless_present = "steps")]
        cap: Option<u32>,
        #[arg(long, requires = "seed")]
        steps: Option<u64>,
        #[arg(long, default_value_t = 0)]
        burn_in: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Drift and tail-bound constants.
    Constants {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Checks the drift inequality on every state of `{0..max}^routes`.
    DriftScan {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 6)]
        max: u32,
    },
    /// Compares the exponential tail bound with the exact stationary tail.
    TailCheck {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 200)]
        cap: u32,
        #[arg(long, default_value_t = 10)]
        lmax: u32,
    },
    /// Compares the maximal-excursion bound with simulated excursions from
    /// the empty network.
    ExcursionCheck {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        horizon: f64,
        #[arg(long, default_value_t = 10_000)]
        replicas: u64,
        #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
        b: Vec<f64>,
        #[arg(long)]
        seed: u64,
    },
    /// Integrates the fluid model.
    Fluid {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        n0: Vec<f64>,
        #[arg(long = "T")]
        horizon: f64,
        /// Euler step; defaults to 1e-3 · min C / max ν.
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Lifts a workload vector to the invariant manifold.
    Lift {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        workload: Vec<f64>,
    },
    /// Heavy-traffic experiments on the family approaching a critically
    /// loaded spec.
    HeavyTraffic {
        /// Critically loaded spec (A ρ = C).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        theta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,50")]
        r_list: Vec<f64>,
        /// Simulation steps per index when the lattice is too large.
        #[arg(long, default_value_t = 1_000_000)]
        budget: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        ssc_replicas: u64,
        /// Horizon of the collapse paths, in diffusion-scaled time.
        #[arg(long, default_value_t = 1.0)]
        ssc_horizon: f64,
        #[arg(long, default_value_t = 0.99)]
        quantile: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Allocate { .. } => "allocate",
            Command::Simulate { .. } => "simulate",
            Command::Stationary { .. } => "stationary",
            Command::Constants { .. } => "constants",
            Command::DriftScan { .. } => "drift-scan",
            Command::TailCheck { .. } => "tail-check",
            Command::ExcursionCheck { .. } => "excursion-check",
            Command::Fluid { .. } => "fluid",
            Command::Lift { .. } => "lift",
            Command::HeavyTraffic { .. } => "heavy-traffic",
        }
    }

    fn spec_path(&self) -> &Path {
        match self {
            Command::Allocate { spec, .. }
            | Command::Simulate { spec, .. }
            | Command::Stationary { spec, .. }
            | Command::Constants { spec }
            | Command::DriftScan { spec, .. }
            | Command::TailCheck { spec, .. }
            | Command::ExcursionCheck { spec, .. }
            | Command::Fluid { spec, .. }
            | Command::Lift { spec, .. }
            | Command::HeavyTraffic { spec, .. } => spec,
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Command::Simulate { seed, .. } | Command::ExcursionCheck { seed, .. } | Command::HeavyTraffic { seed, .. } => {
                Some(*seed)
            }
            Command::Stationary { seed, .. } => *seed,
            _ => None,
        }
    }
}

/// The spec file could not be read. Reported with exit status 2.
#[derive(Debug)]
pub struct SpecMissing(pub PathBuf);

impl std::fmt::Display for SpecMissing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cannot read spec file {}", self.0.display())
    }
}

impl std::error::Error for SpecMissing {}

fn load_spec(path: &Path) -> Result<(NetworkSpec, String)> {
    let text = std::fs::read_to_string(path).map_err(|_| SpecMissing(path.to_path_buf()))?;
    let spec = NetworkSpec::from_json(&text).with_context(|| format!("invalid spec {}", path.display()))?;
    Ok((spec, hex::encode(Sha256::digest(text.as_bytes()))))
}

fn header(fixed: &[&str], prefix: &str, count: usize) -> Vec<String> {
    let mut h: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    h.extend((1..=count).map(|k| format!("{prefix}{k}")));
    h
}

/// Runs one command inside a pool of `cli.workers` threads and writes its
/// manifest.
pub fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let workers = cli.workers.unwrap_or_else(rayon::current_num_threads);
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    let (spec, spec_hash) = load_spec(cli.command.spec_path())?;
    let mut out = OutputDir::create(&cli.out)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    pool.install(|| dispatch(&cli.command, &spec, &mut out))?;

    let manifest = Manifest {
        command: cli.command.name().to_string(),
        config: serde_json::to_value(&cli.command)?,
        version: env!("CARGO_PKG_VERSION").to_string(),
        spec_path: cli.command.spec_path().display().to_string(),
        spec_sha256: spec_hash,
        seed: cli.command.seed(),
        workers,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        outputs: out.written().iter().map(|p| p.display().to_string()).collect(),
    };
    out.write_unlisted("manifest.json", serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn dispatch(command: &Command, spec: &NetworkSpec, out: &mut OutputDir) -> Result<()> {
    let routes = spec.num_routes();
    match command {
        Command::Allocate { state, .. } => {
            if state.len() != routes || state.iter().any(|&x| !(x >= 0.0)) {
                bail!("--state needs {routes} nonnegative counts");
            }
            out.json("allocation.json", &allocate_real(spec, state)?)?;
        }
        Command::Simulate { horizon, seed, initial, .. } => {
            let initial = FlowState::new(initial.clone().unwrap_or_else(|| vec![0; routes]));
            if initial.counts().len() != routes {
                bail!("--initial needs {routes} counts");
            }
            let trace = simulate_ctmc(spec, &initial, *horizon, *seed)?;
            let rows: Vec<Vec<Cell>> = trace
                .times
                .iter()
                .zip(&trace.states)
                .map(|(t, s)| std::iter::once(Cell::from(*t)).chain(s.iter().map(|&x| Cell::Int(x as i64))).collect())
                .collect();
            out.csv("trace.csv", &header(&["t"], "n_", routes), &rows)?;
            out.json(
                "summary.json",
                &serde_json::json!({
                    "events": trace.times.len() - 1,
                    "horizon": trace.horizon,
                    "max_excursion": max_excursion(&trace),
                }),
            )?;
        }
        Command::Stationary { cap, steps, burn_in, seed, .. } => {
            let law = match (cap, steps) {
                (Some(c), _) => exact_stationary(spec, *c)?,
                (None, Some(n)) => estimate_stationary(spec, *burn_in, *n, seed.expect("clap requires a seed"))?,
                (None, None) => unreachable!("clap requires --cap or --steps"),
            };
            let rows: Vec<Vec<Cell>> = law
                .support
                .iter()
                .zip(&law.probabilities)
                .map(|(s, &p)| s.counts().iter().map(|&c| Cell::from(c)).chain([Cell::from(p)]).collect())
                .collect();
            let mut h = header(&[], "n_", routes);
            h.push("probability".into());
            out.csv("stationary.csv", &h, &rows)?;
            out.json(
                "summary.json",
                &serde_json::json!({
                    "method": law.method,
                    "truncation_or_samples": law.truncation_or_samples,
                    "states": law.support.len(),
                    "mean_total": law.expect(|n| n.iter().map(|&c| c as f64).sum()),
                }),
            )?;
        }
        Command::Constants { .. } => {
            out.json("constants.json", &compute_constants(spec)?)?;
        }
        Command::DriftScan { max, .. } => drift_scan(spec, *max, out)?,
        Command::TailCheck { cap, lmax, .. } => tail_check(spec, *cap, *lmax, out)?,
        Command::ExcursionCheck { horizon, replicas, b, seed, .. } => {
            excursion_check(spec, *horizon, *replicas, b, *seed, out)?
        }
        Command::Fluid { n0, horizon, dt, .. } => {
            if n0.len() != routes {
                bail!("--n0 needs {routes} values");
            }
            let dt = dt.unwrap_or_else(|| default_step(spec));
            let traj = fms_integrate(spec, n0, *horizon, dt)?;
            let distances: Vec<f64> = traj
                .states
                .par_iter()
                .map(|s| manifold_distance(spec, s))
                .collect::<afn_core::Result<_>>()?;
            let rows: Vec<Vec<Cell>> = (0..traj.times.len())
                .map(|k| {
                    std::iter::once(Cell::from(traj.times[k]))
                        .chain(traj.states[k].iter().map(|&x| Cell::from(x)))
                        .chain([Cell::from(traj.lyapunov_values[k]), Cell::from(distances[k])])
                        .collect()
                })
                .collect();
            let mut h = header(&["t"], "n_", routes);
            h.extend(["F".to_string(), "manifold_distance".to_string()]);
            out.csv("fluid.csv", &h, &rows)?;
            out.json(
                "summary.json",
                &serde_json::json!({
                    "dt": dt,
                    "steps": traj.times.len() - 1,
                    "richardson_gap": richardson_gap(spec, n0, *horizon, dt)?,
                    "final_manifold_distance": distances.last(),
                }),
            )?;
        }
        Command::Lift { workload: w, .. } => {
            if w.len() != spec.num_links() {
                bail!("--workload needs {} values", spec.num_links());
            }
            let n = lift(spec, w)?;
            out.json(
                "lift.json",
                &serde_json::json!({
                    "workload": w,
                    "n": n,
                    "workload_of_lift": workload(spec, &n),
                    "manifold_distance": manifold_distance(spec, &n)?,
                }),
            )?;
        }
        Command::HeavyTraffic { theta, r_list, budget, seed, ssc_replicas, ssc_horizon, quantile, .. } => {
            heavy_traffic(spec, theta, r_list, *budget, *seed, *ssc_replicas, *ssc_horizon, *quantile, out)?
        }
    }
    Ok(())
}

fn drift_scan(spec: &NetworkSpec, max: u32, out: &mut OutputDir) -> Result<()> {
    let routes = spec.num_routes();
    let side = max as usize + 1;
    let states: Vec<FlowState> = (1..side.pow(routes as u32))
        .map(|mut idx| {
            let mut c = vec![0u32; routes];
            for i in (0..routes).rev() {
                c[i] = (idx % side) as u32;
                idx /= side;
            }
            FlowState::new(c)
        })
        .collect();
    let results: Vec<(f64, f64, f64)> = states
        .par_iter()
        .map(|s| {
            let (lhs, rhs) = drift_inner_products(spec, s)?;
            Ok((lhs, rhs, expected_drift_l(spec, s)?))
        })
        .collect::<afn_core::Result<_>>()?;
    let mut violations = 0usize;
    let mut worst_excess = f64::NEG_INFINITY;
    let rows: Vec<Vec<Cell>> = states
        .iter()
        .zip(&results)
        .map(|(s, &(lhs, rhs, drift))| {
            let holds = lhs <= rhs + DRIFT_TOL;
            violations += usize::from(!holds);
            worst_excess = worst_excess.max(lhs - rhs);
            s.counts()
                .iter()
                .map(|&c| Cell::from(c))
                .chain([lhs.into(), rhs.into(), holds.into(), drift.into()])
                .collect()
        })
        .collect();
    let mut h = header(&[], "n_", routes);
    h.extend(["lhs", "rhs", "holds", "drift_L"].map(String::from));
    out.csv("drift_scan.csv", &h, &rows)?;
    out.json(
        "summary.json",
        &serde_json::json!({
            "states": states.len(),
            "tolerance": DRIFT_TOL,
            "violations": violations,
            "max_lhs_minus_rhs": worst_excess,
        }),
    )?;
    Ok(())
}

/// Exact tail `P_π(‖N‖∞ ≥ x)` for each threshold.
pub fn exact_tails(spec: &NetworkSpec, cap: u32, thresholds: &[f64]) -> afn_core::Result<Vec<f64>> {
    let law = exact_stationary(spec, cap)?;
    Ok(thresholds
        .iter()
        .map(|&x| law.tail(|n| n.iter().copied().max().unwrap_or(0) as f64, x))
        .collect())
}

fn tail_check(spec: &NetworkSpec, cap: u32, lmax: u32, out: &mut OutputDir) -> Result<()> {
    let constants = compute_constants(spec)?;
    let bounds: Vec<_> = (0..=lmax).map(|l| tail_bound(&constants, l)).collect();
    let thresholds: Vec<f64> = bounds.iter().map(|b| b.norm_threshold).collect();
    let tails = exact_tails(spec, cap, &thresholds)?;
    let rows: Vec<Vec<Cell>> = bounds
        .iter()
        .zip(&tails)
        .map(|(b, &t)| {
            vec![b.level.into(), b.threshold.into(), b.norm_threshold.into(), b.bound.into(), t.into(), (t <= b.bound).into()]
        })
        .collect();
    let h = ["level", "threshold", "norm_threshold", "bound", "exact_tail", "dominated"].map(String::from);
    out.csv("tail_check.csv", &h, &rows)?;
    out.json(
        "tail_check.json",
        &serde_json::json!({
            "cap": cap,
            "constants": constants,
            "all_dominated": tails.iter().zip(&bounds).all(|(t, b)| *t <= b.bound),
        }),
    )?;
    Ok(())
}

/// Sup of `‖N(t)‖∞` over `[0, horizon]` from the empty network, one per
/// replica, in replica order.
pub fn excursion_maxima(spec: &NetworkSpec, horizon: f64, replicas: u64, seed: u64) -> afn_core::Result<Vec<u32>> {
    (0..replicas)
        .into_par_iter()
        .map(|k| {
            let mut rng = replica_rng(seed, k);
            let mut top = 0u32;
            Simulator::new(spec).run_ctmc(&FlowState::zeros(spec.num_routes()), horizon, &mut rng, |_, s| {
                top = top.max(s.max_count());
            })?;
            Ok(top)
        })
        .collect()
}

fn excursion_check(
    spec: &NetworkSpec,
    horizon: f64,
    replicas: u64,
    levels: &[f64],
    seed: u64,
    out: &mut OutputDir,
) -> Result<()> {
    let constants = compute_constants(spec)?;
    let maxima = excursion_maxima(spec, horizon, replicas, seed)?;
    let mut rows = Vec::new();
    let mut all = true;
    for &b in levels {
        let bound = maximal_bound(spec, &constants, horizon, b)?;
        let hits = maxima.iter().filter(|&&m| m as f64 >= b).count();
        let empirical = hits as f64 / replicas.max(1) as f64;
        all &= empirical <= bound;
        rows.push(vec![b.into(), bound.into(), hits.into(), empirical.into(), (empirical <= bound).into()]);
    }
    let h = ["b", "bound", "hits", "empirical", "dominated"].map(String::from);
    out.csv("excursion_check.csv", &h, &rows)?;
    out.json(
        "excursion_check.json",
        &serde_json::json!({
            "horizon": horizon,
            "replicas": replicas,
            "excursion_constant": constants.excursion_constant,
            "all_dominated": all,
        }),
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn heavy_traffic(
    spec: &NetworkSpec,
    theta: &[f64],
    r_list: &[f64],
    budget: u64,
    seed: u64,
    ssc_replicas: u64,
    ssc_horizon: f64,
    quantile: f64,
    out: &mut OutputDir,
) -> Result<()> {
    let family = HeavyTrafficFamily::new(spec.clone(), theta.to_vec())?;
    let report = interchange_experiment(&family, r_list, budget, seed)?;
    let paths = r_list
        .iter()
        .map(|&r| ssc_path_experiment(&family, r, ssc_replicas, ssc_horizon, seed))
        .collect::<afn_core::Result<Vec<_>>>()?;
    let tightness = tightness_diagnostic(&family, r_list, quantile, budget, seed)?;

    let links = spec.num_links();
    let routes = spec.num_routes();
    let rows: Vec<Vec<Cell>> = report
        .entries
        .iter()
        .zip(&paths)
        .zip(&tightness)
        .map(|((e, p), t)| {
            let method = serde_json::to_value(e.method).expect("method serializes");
            let mut row: Vec<Cell> = vec![e.r.into(), e.gap.into(), Cell::Text(method.as_str().unwrap_or("").to_string())];
            row.extend(e.ks_per_link.iter().map(|&x| Cell::from(x)));
            row.extend(e.ks_per_route.iter().map(|&x| Cell::from(x)));
            row.extend([e.ssc_abs.into(), e.ssc_mult.into()]);
            row.extend(e.quantiles.iter().map(|&(_, x)| Cell::from(x)));
            row.extend([p.absolute.into(), p.multiplicative.into(), t.quantile.into(), t.envelope.into()]);
            row
        })
        .collect();
    let mut h = vec!["r".to_string(), "gap".to_string(), "method".to_string()];
    h.extend((1..=links).map(|j| format!("ks_link_{j}")));
    h.extend((1..=routes).map(|i| format!("ks_route_{i}")));
    h.extend(["ssc_abs", "ssc_mult"].map(String::from));
    h.extend(afn_core::heavytraffic::QUANTILE_LEVELS.iter().map(|q| format!("quantile_{q}")));
    h.extend(["ssc_path_abs", "ssc_path_mult", "tightness_quantile", "tightness_envelope"].map(String::from));
    out.csv("heavy_traffic.csv", &h, &rows)?;
    out.json(
        "heavy_traffic.json",
        &serde_json::json!({
            "family": family,
            "srbm": report.srbm,
            "entries": report.entries,
            "ssc_paths": r_list.iter().zip(&paths).map(|(r, p)| serde_json::json!({"r": r, "absolute": p.absolute, "multiplicative": p.multiplicative})).collect::<Vec<_>>(),
            "ssc_replicas": ssc_replicas,
            "ssc_horizon": ssc_horizon,
            "tightness_level": quantile,
            "tightness": tightness,
        }),
    )?;
    Ok(())
}
