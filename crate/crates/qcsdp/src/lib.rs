//! Toolkit for the QC SDP hierarchy of two-prover one-round nonlocal games.
//!
//! The pipeline: describe a game ([`games::Game`]), compile the level-N
//! moment problem over words of measurement symbols ([`hierarchy`]), solve
//! the resulting semidefinite program ([`solver`]), round any feasible
//! solution into an explicit approximately-commuting strategy
//! ([`rounding`]), and extract probabilistic assignments from strategies
//! for oracularized constraint systems ([`extraction`]).

pub mod extraction;
pub mod games;
pub mod hierarchy;
pub mod linalg;
pub mod rounding;
pub mod solver;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid game: {0}")]
    InvalidGame(String),
    #[error("invalid csp: {0}")]
    InvalidCsp(String),
    #[error("too large: {0}")]
    TooLarge(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
