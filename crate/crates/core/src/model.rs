//! Network instances and the quantities derived from them: loads, the gap to
//! critical loading, the uniformization rate and structural predicates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot tolerance for the rank check on the incidence matrix.
const RANK_TOL: f64 = 1e-10;

/// On-disk layout of a network spec. Validation happens in the conversion to
/// [`NetworkSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecFile {
    pub incidence: Vec<Vec<u8>>,
    pub capacity: Vec<f64>,
    pub kappa: Vec<f64>,
    pub alpha: f64,
    pub nu: Vec<f64>,
    pub mu: Vec<f64>,
}

/// A validated bandwidth-sharing network.
///
/// The incidence matrix has one row per link and one column per route. The
/// only way to build one is through [`NetworkSpec::new`] (or deserialization,
/// which calls it), so every instance satisfies the structural invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecFile", into = "SpecFile")]
pub struct NetworkSpec {
    incidence: Vec<Vec<bool>>,
    capacity: Vec<f64>,
    kappa: Vec<f64>,
    alpha: f64,
    nu: Vec<f64>,
    mu: Vec<f64>,
    route_links: Vec<Vec<usize>>,
}

impl TryFrom<SpecFile> for NetworkSpec {
    type Error = Error;

    fn try_from(f: SpecFile) -> Result<Self> {
        NetworkSpec::new(f.incidence, f.capacity, f.kappa, f.alpha, f.nu, f.mu)
    }
}

impl From<NetworkSpec> for SpecFile {
    fn from(s: NetworkSpec) -> Self {
        SpecFile {
            incidence: s
                .incidence
                .iter()
                .map(|row| row.iter().map(|&b| b as u8).collect())
                .collect(),
            capacity: s.capacity,
            kappa: s.kappa,
            alpha: s.alpha,
            nu: s.nu,
            mu: s.mu,
        }
    }
}

fn check_positive(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::InvalidSpec(format!(
            "{name} has length {}, expected {len}",
            v.len()
        )));
    }
    if let Some((k, x)) = v.iter().enumerate().find(|(_, x)| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::InvalidSpec(format!(
            "{name}[{k}] = {x} must be positive and finite"
        )));
    }
    Ok(())
}

/// Rank of a small dense matrix by Gaussian elimination with partial pivoting.
fn matrix_rank(rows: &[Vec<f64>]) -> usize {
    let mut m: Vec<Vec<f64>> = rows.to_vec();
    let nrows = m.len();
    let ncols = m.first().map_or(0, |r| r.len());
    let scale = m
        .iter()
        .flatten()
        .fold(0.0_f64, |acc, x| acc.max(x.abs()));
    if scale == 0.0 {
        return 0;
    }
    let mut rank = 0;
    for col in 0..ncols {
        if rank == nrows {
            break;
        }
        let (piv, piv_val) = (rank..nrows)
            .map(|r| (r, m[r][col].abs()))
            .fold((rank, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_val <= RANK_TOL * scale {
            continue;
        }
        m.swap(rank, piv);
        for r in rank + 1..nrows {
            let f = m[r][col] / m[rank][col];
            if f != 0.0 {
                for c in col..ncols {
                    m[r][c] -= f * m[rank][c];
                }
            }
        }
        rank += 1;
    }
    rank
}

impl NetworkSpec {
    pub fn new(
        incidence: Vec<Vec<u8>>,
        capacity: Vec<f64>,
        kappa: Vec<f64>,
        alpha: f64,
        nu: Vec<f64>,
        mu: Vec<f64>,
    ) -> Result<Self> {
        let links = incidence.len();
        if links == 0 {
            return Err(Error::InvalidSpec("incidence has no rows".into()));
        }
        let routes = incidence[0].len();
        if routes == 0 {
            return Err(Error::InvalidSpec("incidence has no columns".into()));
        }
        for (j, row) in incidence.iter().enumerate() {
            if row.len() != routes {
                return Err(Error::InvalidSpec(format!(
                    "incidence row {j} has length {}, expected {routes}",
                    row.len()
                )));
            }
            if let Some(x) = row.iter().find(|&&x| x > 1) {
                return Err(Error::InvalidSpec(format!(
                    "incidence row {j} contains {x}; entries must be 0 or 1"
                )));
            }
        }
        let route_links: Vec<Vec<usize>> = (0..routes)
            .map(|i| (0..links).filter(|&j| incidence[j][i] == 1).collect())
            .collect();
        if let Some(i) = route_links.iter().position(|l| l.is_empty()) {
            return Err(Error::InvalidSpec(format!("route {i} uses no link")));
        }
        let dense: Vec<Vec<f64>> = incidence
            .iter()
            .map(|row| row.iter().map(|&x| x as f64).collect())
            .collect();
        let rank = matrix_rank(&dense);
        if rank != links {
            return Err(Error::InvalidSpec(format!(
                "incidence has rank {rank}, needs full row rank {links}"
            )));
        }
        check_positive("capacity", &capacity, links)?;
        check_positive("kappa", &kappa, routes)?;
        check_positive("nu", &nu, routes)?;
        check_positive("mu", &mu, routes)?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidSpec(format!("alpha = {alpha} must be positive")));
        }
        Ok(NetworkSpec {
            incidence: incidence
                .into_iter()
                .map(|row| row.into_iter().map(|x| x == 1).collect())
                .collect(),
            capacity,
            kappa,
            alpha,
            nu,
            mu,
            route_links,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SpecFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidSpec(format!("malformed spec JSON: {e}")))?;
        file.try_into()
    }

    /// All routes share one link of capacity `capacity`.
    pub fn single_link(
        capacity: f64,
        kappa: Vec<f64>,
        alpha: f64,
        nu: Vec<f64>,
        mu: Vec<f64>,
    ) -> Result<Self> {
        let routes = nu.len();
        NetworkSpec::new(vec![vec![1; routes]], vec![capacity], kappa, alpha, nu, mu)
    }

    /// Copy of this network with different arrival rates.
    pub fn with_arrival_rates(&self, nu: Vec<f64>) -> Result<Self> {
        check_positive("nu", &nu, self.num_routes())?;
        Ok(NetworkSpec { nu, ..self.clone() })
    }

    pub fn num_links(&self) -> usize {
        self.incidence.len()
    }

    pub fn num_routes(&self) -> usize {
        self.route_links.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn capacity(&self) -> &[f64] {
        &self.capacity
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn arrival_rates(&self) -> &[f64] {
        &self.nu
    }

    pub fn service_rates(&self) -> &[f64] {
        &self.mu
    }

    /// Whether link `j` is on route `i`.
    pub fn uses(&self, j: usize, i: usize) -> bool {
        self.incidence[j][i]
    }

    /// Links on route `i`, ascending.
    pub fn route_links(&self, i: usize) -> &[usize] {
        &self.route_links[i]
    }

    /// `A x` for a route-indexed vector `x`.
    pub fn link_totals(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_links()];
        for (i, links) in self.route_links.iter().enumerate() {
            for &j in links {
                out[j] += x[i];
            }
        }
        out
    }

    /// `Aᵀ p` for a link-indexed vector `p`.
    pub fn route_totals(&self, p: &[f64]) -> Vec<f64> {
        self.route_links
            .iter()
            .map(|links| links.iter().map(|&j| p[j]).sum())
            .collect()
    }

    /// Offered load per route, `ν_i / μ_i`.
    pub fn rho(&self) -> Vec<f64> {
        self.nu.iter().zip(&self.mu).map(|(n, m)| n / m).collect()
    }

    pub fn max_capacity(&self) -> f64 {
        self.capacity.iter().cloned().fold(f64::MIN, f64::max)
    }
}

/// Route loads, link loads and the gap to critical loading.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadProfile {
    pub rho: Vec<f64>,
    pub link_load: Vec<f64>,
    pub gap: f64,
}

/// Loads and gap of an underloaded network.
pub fn load_profile(spec: &NetworkSpec) -> Result<LoadProfile> {
    let rho = spec.rho();
    let link_load = spec.link_totals(&rho);
    let mut gap = f64::INFINITY;
    for (j, (&load, &cap)) in link_load.iter().zip(spec.capacity()).enumerate() {
        if load >= cap {
            return Err(Error::NotUnderloaded { link: j, load, capacity: cap });
        }
        gap = gap.min(cap / load - 1.0);
    }
    Ok(LoadProfile { rho, link_load, gap })
}

/// Uniform event rate dominating every state's total transition rate.
pub fn uniformization_rate(spec: &NetworkSpec) -> f64 {
    let cmax = spec.max_capacity();
    spec.arrival_rates()
        .iter()
        .zip(spec.service_rates())
        .map(|(n, m)| n + m * cmax)
        .sum()
}

/// Every link carries at least one route that uses no other link.
pub fn local_traffic_holds(spec: &NetworkSpec) -> bool {
    (0..spec.num_links()).all(|j| {
        (0..spec.num_routes()).any(|i| spec.route_links(i) == [j])
    })
}

/// Largest relative violation of `Aρ = C`. Zero for a critically loaded spec.
pub fn criticality_defect(spec: &NetworkSpec) -> f64 {
    let load = spec.link_totals(&spec.rho());
    load.iter()
        .zip(spec.capacity())
        .map(|(l, c)| ((l - c) / c).abs())
        .fold(0.0, f64::max)
}
