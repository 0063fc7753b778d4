//! Joint drift–diffusion parameter estimation for degenerate SDEs observed
//! completely or partially at high frequency.
//!
//! The crate targets systems where Brownian noise enters only a subset of
//! the coordinates (the *rough* block) and propagates to the remaining
//! *smooth* coordinates through the drift — kinetic Langevin dynamics,
//! generalized Langevin chains with auxiliary memory, and neural oscillator
//! models are the built-in examples. For such systems, naive quasi-likelihoods
//! based on the Euler scheme break down; the estimators here use per-block
//! residual standardization and Δ-expanded covariances so that all parameters
//! are estimated jointly, with sampling-rate requirements that weaken as the
//! expansion order p grows.
//!
//! Module map:
//!
//! * [`scalar`] — plain/dual number abstraction (forward-mode derivatives);
//! * [`linalg`] — small dense matrices, Cholesky, eigenvalues, expm;
//! * [`model`] — the block-structured model trait and rank diagnostics;
//! * [`builtins`] — the bundled example models;
//! * [`moments`] — truncated conditional means, residuals, covariance
//!   expansions;
//! * [`simulate`] — locally-Gaussian path simulation and subsampling;
//! * [`oracle`] — independent slow references: finite-difference operators,
//!   exact linear-SDE moments, Monte-Carlo transition moments, joint-Gaussian
//!   likelihoods;
//! * [`contrast`] — the estimating objective and its gradient;
//! * [`estimate`] — optimizers (box-projected Adam, Nelder–Mead) and
//!   asymptotic precision;
//! * [`kalman`] — marginal likelihood for partially observed oscillators;
//! * [`mc`] — Monte-Carlo experiment driver;
//! * [`io`] — record/report file formats;
//! * [`cli`] — command-line front end.

pub mod builtins;
pub mod contrast;
pub mod estimate;
pub mod io;
pub mod kalman;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod moments;
pub mod oracle;
pub mod scalar;
pub mod simulate;

pub mod cli;

/// The user guide (`book/`), mirrored as module documentation so that every
/// code example in it compiles and runs under `cargo test --doc`.
pub mod guide {
    #[doc = include_str!("../../../book/src/01-overview.md")]
    pub mod ch01_overview {}
    #[doc = include_str!("../../../book/src/02-models.md")]
    pub mod ch02_models {}
    #[doc = include_str!("../../../book/src/03-simulate.md")]
    pub mod ch03_simulate {}
    #[doc = include_str!("../../../book/src/04-moments.md")]
    pub mod ch04_moments {}
    #[doc = include_str!("../../../book/src/05-contrast.md")]
    pub mod ch05_contrast {}
    #[doc = include_str!("../../../book/src/06-estimate.md")]
    pub mod ch06_estimate {}
    #[doc = include_str!("../../../book/src/07-partial.md")]
    pub mod ch07_partial {}
    #[doc = include_str!("../../../book/src/08-cli.md")]
    pub mod ch08_cli {}
    #[doc = include_str!("../../../book/src/09-oracles.md")]
    pub mod ch09_oracles {}
}
