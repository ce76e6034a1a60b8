//! Trajectory simulation and uncertainty propagation for dynamical systems
//! whose transition function is a Gaussian process.
//!
//! The transition model is `x_{k+1} = f(x_k) + w_k` with `f ~ GP(mean, kernel)`
//! and i.i.d. Gaussian process noise `w_k`. Because a GP is a distribution
//! over functions, successive evaluations of `f` along a trajectory are
//! correlated; treating them as independent underestimates the predicted
//! uncertainty. This crate provides:
//!
//! - [`sampler`]: exact trajectory sampling from the joint distribution via
//!   incrementally extended Cholesky factors (ground truth),
//! - [`basis`]: explicit approximate function samples from finite
//!   basis-function expansions (random Fourier features, Nystrom
//!   eigenfunctions, exact linear features), frozen across a rollout,
//! - [`moments`]: direct Gaussian approximation of the joint trajectory
//!   distribution by linearizing the mean chain, next to the block-diagonal
//!   independence baseline,
//! - [`proxy`]: closed-form parametric reference systems whose trajectory
//!   laws match kernel limit cases, used as validation oracles,
//! - [`report`]/[`config`]: a seeded, reproducible experiment harness with
//!   CSV artifacts (see the `gpsim` binary).

pub mod basis;
pub mod config;
pub mod error;
pub mod gp;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod mean;
pub mod moments;
pub mod proxy;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod stats;

pub use error::{Error, Result};
pub use gp::{GpModel, Horizon};
pub use kernel::{MatrixKernel, ScalarKernel};
pub use linalg::{
    cholesky, cholesky_extend, gaussian_condition, mvn_sample, CholFactor, GaussianDist,
    IncrementalCholesky, JitterPolicy, SymMatrix,
};
pub use mean::MeanFn;
pub use sampler::{MethodTag, TrajectoryBatch};
