//! Simulation and sensitivity analysis for McKean-Vlasov SDEs with memory:
//!
//! ```text
//! dX(t) = b(t, X_t, L_{X_t}) dt + sigma(t, X_t, L_{X_t}) dW(t),   X_t(theta) = X(t + theta),
//! ```
//!
//! where `X_t` is the segment of the path on `[-r0, 0]`. The crate provides
//! interacting-particle Euler schemes ([`mkv_solver`]), the tangent processes
//! along a simulated ensemble ([`tangents`]), and Monte Carlo estimators of
//! the intrinsic derivative `D^L_phi (P_T f)(mu)` built from Bismut-type
//! weights, checked against finite differences and deterministic oracles
//! ([`bismut`]).

pub mod bismut;
pub mod error;
pub mod mkv_solver;
pub mod models;
pub mod pathspace;
pub mod rng;
pub mod tangents;

pub use error::{Error, Result};
