//! Sparse linear inverse problems: iterative solvers (ISTA, FISTA, AMP) and
//! their learned unfoldings (LISTA, LAMP).

pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod problem;
pub mod rng;
pub mod solvers;
pub mod train;

pub use error::{Error, Result};
