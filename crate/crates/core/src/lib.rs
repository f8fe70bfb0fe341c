//! Learning non-Markovian noise (memory kernels), Hamiltonians and Hamiltonian
//! ensembles from short-time derivatives of process traces.

pub mod cli;
pub mod error;
pub mod fitter;
pub mod learner;
pub mod model;
pub mod numerics;
pub mod offsets;
pub mod pauli;
pub mod planner;
pub mod sampler;
pub mod sim_exact;
pub mod sim_gaussian;

pub use error::{Error, Result};
