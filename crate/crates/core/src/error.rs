use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("network is not underloaded: link {link} carries load {load} against capacity {capacity}")]
    NotUnderloaded { link: usize, load: f64, capacity: f64 },

    #[error("solver did not converge: residual {residual:e} after {iterations} iterations")]
    SolverDidNotConverge { residual: f64, iterations: usize },

    #[error("route {route} exceeded the state cap of {cap} flows")]
    StateCapExceeded { route: usize, cap: u32 },

    #[error("truncated lattice needs {states} states, budget is {budget}")]
    CapTooLargeForBudget { states: f64, budget: usize },

    #[error("stationary estimate requested with zero steps")]
    EmptySample,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("stationary density is not integrable on the workload cone for either drift sign")]
    NotNormalizable,

    #[error("drift threshold not certified for any candidate up to {limit}")]
    DriftNotCertified { limit: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
