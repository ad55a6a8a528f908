//! Cooperative pedestrian localization engine.
//!
//! The crate implements a partially decentralized localization architecture
//! for groups of agents carrying dual foot-mounted inertial sensors and
//! inter-agent ranging devices:
//!
//! - [`ins`] — per-foot ZUPT-aided strapdown inertial navigation with
//!   recursive step segmentation. Each detected step emits a compact
//!   [`ins::StepUpdate`] (displacement, heading change, covariance blocks)
//!   and the local filter is reset.
//! - [`deadreck`] — step-wise dead reckoning: chains step updates into a
//!   global position/heading track with first-order covariance propagation,
//!   and merges corrections sent down from the fusion center.
//! - [`fusion`] — the central estimator over the stacked `[position, heading]`
//!   state of every foot: marginalization-based conditioning, sigma-point
//!   separation-constraint updates between the feet of one agent, and
//!   sampling-based robust range updates with a Cauchy-uniform likelihood.
//! - [`messaging`] — wire codecs for the three-tier architecture, a
//!   deterministic lossy/disconnecting network simulation, the round-robin
//!   ranging scheduler, and the communication audit.
//! - [`scenarios`] — ground-truth generation, synthetic measurements with
//!   the reference noise models, Monte-Carlo execution and RMSE/correlation
//!   metrics.
//! - [`oracles`] — independent brute-force reference implementations
//!   (joint Kalman conditioning, Monte-Carlo projection moments, dense
//!   quadrature) used by the test suites and the CLI self-check.

pub mod deadreck;
pub mod fusion;
pub mod ins;
pub mod linalg;
pub mod messaging;
pub mod oracles;
pub mod scenarios;

/// Standard gravity magnitude used by the mechanization equations, m/s².
pub const GRAVITY: f64 = 9.81;
