//! Risk-sensitive discounted continuous-time Markov decision processes:
//! model construction, Lyapunov certificates, the θ-parameterized HJB
//! solver, Monte Carlo simulation and verification.

pub mod cli;
pub mod config;
pub mod fixtures;
pub mod hjb;
pub mod lyapunov;
pub mod model;
pub mod report;
pub mod simulate;
pub mod verify;
