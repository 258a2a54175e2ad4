//! Linear-quadratic mean field social optimization.
//!
//! Solvers for the limiting and finite-population Riccati systems, a brute
//! force full-population oracle, centralized and decentralized feedback
//! gains, Monte Carlo simulation of the closed loop, the exact optimality gap
//! of decentralized control, the mean field game comparison and the
//! mean-variance portfolio specialization.

pub mod finite_riccati;
pub mod full_oracle;
pub mod gains;
pub mod limit_riccati;
pub mod linalg;
pub mod mfg_compare;
pub mod model;
pub mod odecore;
pub mod portfolio;
pub mod simulate;

use thiserror::Error;

pub use linalg::SingularInverse;
pub use model::{InitialLaw, ModelParams};
pub use odecore::{Failed, Failure, MatrixTrajectory, Options};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("solve failed: {0}")]
    Failed(Box<Failed>),
    #[error(transparent)]
    Singular(#[from] SingularInverse),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("oracle size N*n = {0} exceeds cap {1}")]
    CapExceeded(usize, usize),
    #[error("block structure violated: {0}")]
    StructureViolation(String),
}

impl From<Failed> for SolveError {
    fn from(f: Failed) -> Self {
        SolveError::Failed(Box::new(f))
    }
}

impl SolveError {
    pub fn failure(&self) -> Option<&Failure> {
        match self {
            SolveError::Failed(f) => Some(&f.failure),
            _ => None,
        }
    }
}
