use thiserror::Error;

use crate::basis::BasisError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid medium: {0}")]
    Medium(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("eikonal solve did not converge after {sweeps} sweeps (last update {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },
    #[error("positivity floor breached at node (i={i}, j={j}, k={k}, q={q}): u = {value:e}")]
    Positivity {
        i: usize,
        j: usize,
        k: usize,
        q: usize,
        value: f64,
    },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
