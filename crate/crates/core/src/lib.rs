//! Simulation and least-squares drift estimation for the fractional
//! Ornstein-Uhlenbeck process with periodic mean
//!
//! ```text
//! dX_t = (L(t) - alpha X_t) dt + sigma dB^H_t,    L(t) = sum_i mu_i phi_i(t)
//! ```
//!
//! The crate is organised bottom-up:
//!
//! * [`fgn`] exact-covariance fractional Gaussian noise (circulant embedding
//!   with a Toeplitz Cholesky fallback).
//! * [`model`] periodic basis, Euler simulation and the deterministic
//!   steady-state response `h~`.
//! * [`estimator`] the least-squares estimator `Q_n^{-1} P_n` with its
//!   closed-form inverse and the trace correction for divergence integrals.
//! * [`asymptotics`] limit matrices `C`, `Sigma0` and the asymptotic
//!   covariance `sigma^2 C Sigma0 C`.
//! * [`experiments`] seeded Monte Carlo studies, parallel over replicates
//!   when the `parallel` feature is enabled.
//! * [`config`] and [`io`] the JSON configuration and CSV formats used by the
//!   `fou` command-line tool.

pub mod asymptotics;
pub mod config;
pub mod estimator;
pub mod experiments;
pub mod fgn;
pub mod io;
pub mod model;
pub mod parallel;
pub mod quadrature;
pub mod rng;
pub mod stats;

pub use asymptotics::LimitMatrices;
pub use estimator::{EstimateOptions, EstimateResult, EstimatorMode};
pub use fgn::{FbmPath, FgnSpec, HurstExponent};
pub use model::{BasisFunction, BasisSet, FouModel, SamplePath, StartMode};
