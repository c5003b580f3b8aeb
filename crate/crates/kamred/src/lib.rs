//! Constructive reduction of quasiperiodic sl(2,R) cocycles in weighted
//! Fourier classes, together with an independent cocycle simulator.
//!
//! The library is organized bottom-up:
//! - [`mat2`]: 2x2 complex/real-traceless matrix types,
//! - [`weights`]: weight and approximating functions, arithmetic condition,
//!   parameter schedules,
//! - [`fourier`]: finitely supported matrix Fourier series with weighted norms,
//! - [`sl2`]: spectral classification of constant traceless matrices,
//! - [`resonance`]: non-resonance tests and the resonance-removing conjugation,
//! - [`cohomology`]: the linearized conjugation equation,
//! - [`engine`]: the inductive reduction steps and the driver,
//! - [`lab`]: ODE-level ground truth (integration, Lyapunov exponents,
//!   rotation numbers, pointwise conjugation checks),
//! - [`config`] / [`cli`]: run configuration and the command-line front end.

pub mod cli;
pub mod cohomology;
pub mod config;
pub mod engine;
pub mod fourier;
pub mod lab;
pub mod mat2;
pub mod resonance;
pub mod sl2;
pub mod weights;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub(crate) fn numerical(msg: impl Into<String>) -> Error {
    Error::Numerical(msg.into())
}
