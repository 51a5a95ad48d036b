//! Calibration toolkit for credit-rating transition models driven by latent
//! Gaussian AR(1) factors.
//!
//! Observed migration counts are multinomial draws whose cell probabilities
//! are monotone transforms (probit or logistic) of signals; each signal is an
//! affine function of a stationary latent factor process and, optionally, of
//! exogenous observed factors.  The crate provides
//!
//! * the domain model: rating schemes, migration count series, model
//!   parameters and their validation ([`domain`]);
//! * the three response families and their signal derivatives ([`models`]);
//! * an exact Kalman filter / smoother for the auxiliary linear-Gaussian
//!   state-space models used throughout ([`kalman`]);
//! * a Laplace approximation of the observed-data likelihood built on a
//!   Newton mode search ([`laplace`]);
//! * bootstrap and mode-guided importance-sampling particle filters
//!   ([`particle`]);
//! * Gaussian-process regression over likelihood surfaces, including an
//!   exact Kronecker fast path for Cartesian grids ([`gpr`]);
//! * forward simulation of latent paths and migration counts ([`simulate`]);
//! * calibration drivers: profiles, maximum-likelihood fits, stepwise
//!   two-factor calibration and scenario studies ([`calibrate`]).
//!
//! All randomness flows through caller-supplied ChaCha generators so that
//! every estimate in the crate is reproducible from a master seed, with or
//! without the `parallel` feature.

pub mod calibrate;
pub mod domain;
pub mod error;
pub mod gpr;
pub mod kalman;
pub mod laplace;
pub mod math;
pub mod models;
pub mod optimize;
pub mod parallel;
pub mod particle;
pub mod simulate;

pub use error::CalibError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CalibError>;
