//! Flow-level model of α-fair bandwidth-sharing networks: allocation,
//! simulation, Lyapunov bounds, fluid dynamics and heavy-traffic limits.

mod convex;
pub mod error;
pub mod model;
pub mod allocator;
pub mod simulator;
pub mod lyapunov;
pub mod fluid;
pub mod heavytraffic;

pub use error::{Error, Result};
