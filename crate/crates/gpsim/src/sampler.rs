//! Ground-truth trajectory sampling from the joint GP distribution.
//!
//! A trajectory sample is generated step by step: at step `k` the Cholesky
//! factor of the covariance over all visited points is extended by one block
//! row, and the next state is the new block row of the factor applied to the
//! accumulated standard-normal draws. No independence assumption enters; the
//! sampled trajectories follow the exact joint distribution, at a total cost
//! per trajectory of one full factorization (cubic in the horizon).

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::{GpModel, Horizon};
use crate::linalg::{IncrementalCholesky, JitterPolicy, SymMatrix};
use crate::rng::{standard_normals, step_slot, substream};

/// Divergence guard: states beyond this magnitude abort the rollout.
pub const DIVERGENCE_LIMIT: f64 = 1e100;

/// Which procedure produced a batch of trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodTag {
    GroundTruth,
    ApproxFunctionSample,
    ProxyReference,
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::GroundTruth => write!(f, "ground_truth"),
            Self::ApproxFunctionSample => write!(f, "afs"),
            Self::ProxyReference => write!(f, "proxy"),
        }
    }
}

/// Sampled state trajectories with seed provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    method: MethodTag,
    seed: u64,
    state_dim: usize,
    steps: usize,
    controlled: bool,
    /// One `(steps + 1) x state_dim` matrix per trajectory; row `k` is the
    /// state at step `k`, row 0 the initial state.
    states: Vec<DMatrix<f64>>,
}

impl TrajectoryBatch {
    pub(crate) fn from_parts(
        method: MethodTag,
        seed: u64,
        state_dim: usize,
        steps: usize,
        controlled: bool,
        states: Vec<DMatrix<f64>>,
    ) -> Self {
        debug_assert!(states
            .iter()
            .all(|s| s.nrows() == steps + 1 && s.ncols() == state_dim));
        Self {
            method,
            seed,
            state_dim,
            steps,
            controlled,
            states,
        }
    }

    pub fn method(&self) -> MethodTag {
        self.method
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Horizon length `N`; trajectories contain `N + 1` states.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sample_count(&self) -> usize {
        self.states.len()
    }

    pub fn is_controlled(&self) -> bool {
        self.controlled
    }

    /// State of trajectory `traj` at step `step`.
    pub fn state(&self, traj: usize, step: usize) -> DVector<f64> {
        self.states[traj].row(step).transpose()
    }

    /// All states of one trajectory, one row per step.
    pub fn trajectory(&self, traj: usize) -> &DMatrix<f64> {
        &self.states[traj]
    }
}

/// Standard-normal disturbance draws, reproducible from
/// `(seed, trajectory, step)` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    draws: Vec<DMatrix<f64>>,
}

impl NoiseDraws {
    /// Materializes the draw tensor used by the samplers for this seed.
    pub fn derive(seed: u64, sample_count: usize, steps: usize, dim: usize) -> Self {
        let draws = (0..sample_count)
            .map(|traj| {
                let mut m = DMatrix::zeros(steps, dim);
                for k in 0..steps {
                    m.row_mut(k).copy_from(&step_noise(seed, traj, k, dim).transpose());
                }
                m
            })
            .collect();
        Self { draws }
    }

    pub fn draw(&self, traj: usize, step: usize) -> DVector<f64> {
        self.draws[traj].row(step).transpose()
    }
}

/// The step-`k` standard-normal draw of one trajectory.
pub(crate) fn step_noise(seed: u64, traj: usize, step: usize, dim: usize) -> DVector<f64> {
    standard_normals(&mut substream(seed, traj as u64, step_slot(step)), dim)
}

fn check_finite(x: &DVector<f64>, traj: usize, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            trajectory: traj,
            step,
            limit: DIVERGENCE_LIMIT,
        })
    }
}

fn stack_state_input(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

/// One trajectory of the iterative joint-distribution sampler.
fn sample_one(
    model: &GpModel,
    x0: &DVector<f64>,
    inputs: Option<&[DVector<f64>]>,
    steps: usize,
    seed: u64,
    traj: usize,
) -> Result<DMatrix<f64>> {
    let n = model.state_dim();
    let mut factor = IncrementalCholesky::with_capacity(steps * n, JitterPolicy::default());
    let mut states = DMatrix::zeros(steps + 1, n);
    states.row_mut(0).copy_from(&x0.transpose());
    let mut points: Vec<DVector<f64>> = Vec::with_capacity(steps);
    let mut noise_stack = DVector::zeros(steps * n);
    let mut x = x0.clone();

    for k in 0..steps {
        let z = match inputs {
            None => x.clone(),
            Some(us) => stack_state_input(&x, &us[k]),
        };
        let cross = model.posterior_gram(&points, std::slice::from_ref(&z))?;
        let mut corner = model.posterior_kernel(&z, &z)?;
        corner += model.noise_cov().entries();
        factor.extend(&cross, &SymMatrix::symmetrized(corner))?;

        let w = step_noise(seed, traj, k, n);
        noise_stack.rows_mut(k * n, n).copy_from(&w);

        let dim = (k + 1) * n;
        let mut x_next = model.posterior_mean(&z)?;
        x_next += factor.apply_last_rows(n, &noise_stack.as_slice()[..dim]);
        check_finite(&x_next, traj, k + 1)?;

        states.row_mut(k + 1).copy_from(&x_next.transpose());
        points.push(z);
        x = x_next;
    }
    Ok(states)
}

/// Draws `sample_count` exact trajectory samples over the horizon.
///
/// Trajectories use disturbance substreams keyed by `(seed, trajectory,
/// step)`, so the batch is bitwise reproducible and identical whether
/// trajectories run sequentially or in parallel.
pub fn sample_trajectories(
    model: &GpModel,
    horizon: &Horizon,
    sample_count: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    sample_impl(model, horizon, None, sample_count, seed)
}

/// Controlled-system variant: the kernel and mean are evaluated on stacked
/// state/input points `[x_k; u_k]`. The disturbance draws do not depend on
/// `inputs`, so rollouts under different input sequences reuse identical
/// noise for the same seed.
pub fn sample_trajectories_controlled(
    model: &GpModel,
    horizon: &Horizon,
    inputs: &[DVector<f64>],
    sample_count: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if inputs.len() != horizon.steps() {
        return Err(Error::DimensionMismatch {
            context: "sample_trajectories_controlled (input rows)",
            expected: horizon.steps(),
            got: inputs.len(),
        });
    }
    if let Some(first) = inputs.first() {
        if inputs.iter().any(|u| u.len() != first.len()) {
            return Err(Error::InvalidArgument(
                "all input vectors must have the same length".into(),
            ));
        }
    }
    sample_impl(model, horizon, Some(inputs), sample_count, seed)
}

fn sample_impl(
    model: &GpModel,
    horizon: &Horizon,
    inputs: Option<&[DVector<f64>]>,
    sample_count: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    let n = model.state_dim();
    if horizon.initial_state().len() != n {
        return Err(Error::DimensionMismatch {
            context: "sample_trajectories (initial state)",
            expected: n,
            got: horizon.initial_state().len(),
        });
    }
    if sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be at least 1".into()));
    }
    let states: Result<Vec<DMatrix<f64>>> = (0..sample_count)
        .into_par_iter()
        .map(|traj| {
            sample_one(
                model,
                horizon.initial_state(),
                inputs,
                horizon.steps(),
                seed,
                traj,
            )
        })
        .collect();
    Ok(TrajectoryBatch::from_parts(
        MethodTag::GroundTruth,
        seed,
        n,
        horizon.steps(),
        inputs.is_some(),
        states?,
    ))
}

/// Lengthens a ground-truth batch by `extra_steps`.
///
/// The factor of each trajectory is rebuilt deterministically from the seed
/// (the disturbance substreams are keyed by step, so the continuation draws
/// the same noise it would have drawn in a single longer run); the first
/// `N + 1` states are reproduced bitwise.
pub fn resume_extend(
    batch: &TrajectoryBatch,
    model: &GpModel,
    extra_steps: usize,
) -> Result<TrajectoryBatch> {
    if batch.method() != MethodTag::GroundTruth {
        return Err(Error::UnsupportedMethod {
            what: format!("resume_extend on a '{}' batch", batch.method()),
        });
    }
    if batch.is_controlled() {
        return Err(Error::UnsupportedMethod {
            what: "resume_extend on a controlled batch (inputs beyond the horizon are unknown)"
                .into(),
        });
    }
    if extra_steps == 0 {
        return Ok(batch.clone());
    }
    if batch.sample_count() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let x0 = batch.state(0, 0);
    let horizon = Horizon::new(batch.steps() + extra_steps, x0)?;
    let extended = sample_trajectories(model, &horizon, batch.sample_count(), batch.seed())?;
    // The prefix must reproduce the original batch exactly.
    debug_assert!((0..batch.sample_count()).all(|i| {
        batch.trajectory(i).row_iter().zip(extended.trajectory(i).row_iter().take(batch.steps() + 1))
            .all(|(a, b)| a == b)
    }));
    Ok(extended)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{MatrixKernel, ScalarKernel};
    use crate::mean::MeanFn;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn v(vals: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(vals)
    }

    fn scalar_model(kernel: ScalarKernel, gain: f64, noise_var: f64) -> GpModel {
        GpModel::new(
            MeanFn::scalar_gain(gain),
            MatrixKernel::scalar(kernel),
            SymMatrix::scalar(noise_var),
        )
        .unwrap()
    }

    #[test]
    fn degenerate_gp_follows_mean_recursion() {
        // Zero kernel and zero noise: the covariance is handled by the jitter
        // floor, so trajectories track the deterministic recursion to within
        // the jitter scale.
        let model = scalar_model(ScalarKernel::squared_exponential(0.0, 1.0).unwrap(), 0.95, 0.0);
        let h = Horizon::new(10, v(&[1.0])).unwrap();
        let batch = sample_trajectories(&model, &h, 3, 7).unwrap();
        for traj in 0..3 {
            let mut expect = 1.0;
            for k in 1..=10 {
                expect *= 0.95;
                assert_relative_eq!(batch.state(traj, k)[0], expect, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn determinism_bitwise() {
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 2.0).unwrap(), 0.95, 0.5);
        let h = Horizon::new(6, v(&[0.3])).unwrap();
        let a = sample_trajectories(&model, &h, 16, 99).unwrap();
        let b = sample_trajectories(&model, &h, 16, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_step_marginal_moments() {
        // N = 1: x_1 ~ N(mean(x0), k(x0,x0) + Q).
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 2.0).unwrap(), 0.95, 0.5);
        let h = Horizon::new(1, v(&[2.0])).unwrap();
        let n_s = 20_000;
        let batch = sample_trajectories(&model, &h, n_s, 12).unwrap();
        let vals: Vec<f64> = (0..n_s).map(|i| batch.state(i, 1)[0]).collect();
        let mean: f64 = vals.iter().sum::<f64>() / n_s as f64;
        let var: f64 =
            vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n_s - 1) as f64;
        let true_var = 1.5;
        let se = (true_var / n_s as f64).sqrt();
        assert!((mean - 0.95 * 2.0).abs() < 3.0 * se, "mean {mean}");
        assert!((var - true_var).abs() / true_var < 0.05, "var {var}");
    }

    #[test]
    fn resume_matches_single_shot_bitwise() {
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 10.0).unwrap(), 0.95, 1.0);
        let h10 = Horizon::new(10, v(&[1.0])).unwrap();
        let h20 = Horizon::new(20, v(&[1.0])).unwrap();
        let short = sample_trajectories(&model, &h10, 4, 5).unwrap();
        let resumed = resume_extend(&short, &model, 10).unwrap();
        let full = sample_trajectories(&model, &h20, 4, 5).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn resume_zero_steps_is_identity() {
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 1.0).unwrap(), 0.95, 1.0);
        let h = Horizon::new(4, v(&[1.0])).unwrap();
        let batch = sample_trajectories(&model, &h, 2, 3).unwrap();
        let same = resume_extend(&batch, &model, 0).unwrap();
        assert_eq!(batch, same);
    }

    #[test]
    fn resume_rejects_foreign_batches() {
        let spec = crate::proxy::ProxySpec::new(
            crate::proxy::ProxyVariant::ConstantOffset,
            0.95,
            1.0,
            1.0,
            1.0,
            4,
        )
        .unwrap();
        let batch = crate::proxy::proxy_simulate(&spec, 2, 1).unwrap();
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 1.0).unwrap(), 0.95, 1.0);
        assert!(matches!(
            resume_extend(&batch, &model, 1),
            Err(Error::UnsupportedMethod { .. })
        ));
    }

    #[test]
    fn controlled_deterministic_forced_recursion() {
        // Zero kernel, zero noise, mean(z) = 0.95 x + u.
        let model = GpModel::new(
            MeanFn::linear(dmatrix![0.95, 1.0]),
            MatrixKernel::scalar(ScalarKernel::squared_exponential(0.0, 1.0).unwrap()),
            SymMatrix::scalar(0.0),
        )
        .unwrap();
        let h = Horizon::new(5, v(&[1.0])).unwrap();
        let inputs: Vec<DVector<f64>> = (0..5).map(|k| v(&[0.1 * k as f64])).collect();
        let batch = sample_trajectories_controlled(&model, &h, &inputs, 2, 7).unwrap();
        let mut expect = 1.0;
        for k in 0..5 {
            expect = 0.95 * expect + 0.1 * k as f64;
            assert_relative_eq!(batch.state(0, k + 1)[0], expect, epsilon = 1e-4);
        }
    }

    #[test]
    fn controlled_with_zero_inputs_matches_autonomous_bitwise() {
        // The autonomous restriction evaluates the same kernel/mean on points
        // padded with u = 0, which is arithmetic-identical.
        let controlled = GpModel::new(
            MeanFn::linear(dmatrix![0.95, 0.4]),
            MatrixKernel::scalar(ScalarKernel::squared_exponential(1.0, 2.0).unwrap()),
            SymMatrix::scalar(0.3),
        )
        .unwrap();
        let autonomous = GpModel::new(
            MeanFn::linear(dmatrix![0.95]),
            MatrixKernel::scalar(ScalarKernel::squared_exponential(1.0, 2.0).unwrap()),
            SymMatrix::scalar(0.3),
        )
        .unwrap();
        let h = Horizon::new(8, v(&[1.0])).unwrap();
        let zeros: Vec<DVector<f64>> = (0..8).map(|_| v(&[0.0])).collect();
        let a = sample_trajectories_controlled(&controlled, &h, &zeros, 5, 42).unwrap();
        let b = sample_trajectories(&autonomous, &h, 5, 42).unwrap();
        for traj in 0..5 {
            assert_eq!(a.trajectory(traj), b.trajectory(traj));
        }
    }

    #[test]
    fn noise_draws_identical_across_input_sequences() {
        // Recover the disturbance of each step from rollouts with a
        // state-independent model; different inputs must reuse the same noise.
        let model = GpModel::new(
            MeanFn::linear(dmatrix![0.95, 1.0]),
            MatrixKernel::scalar(ScalarKernel::squared_exponential(0.0, 1.0).unwrap()),
            SymMatrix::scalar(1.0),
        )
        .unwrap();
        let h = Horizon::new(6, v(&[0.0])).unwrap();
        let u1: Vec<DVector<f64>> = (0..6).map(|_| v(&[0.0])).collect();
        let u2: Vec<DVector<f64>> = (0..6).map(|k| v(&[(k as f64) - 2.0])).collect();
        let b1 = sample_trajectories_controlled(&model, &h, &u1, 3, 13).unwrap();
        let b2 = sample_trajectories_controlled(&model, &h, &u2, 3, 13).unwrap();
        let draws = NoiseDraws::derive(13, 3, 6, 1);
        for traj in 0..3 {
            for k in 0..6 {
                let w1 = b1.state(traj, k + 1)[0] - 0.95 * b1.state(traj, k)[0] - u1[k][0];
                let w2 = b2.state(traj, k + 1)[0] - 0.95 * b2.state(traj, k)[0] - u2[k][0];
                assert_relative_eq!(w1, w2, epsilon = 1e-9);
                assert_relative_eq!(w1, draws.draw(traj, k)[0], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn divergence_guard_reports_step() {
        // An unstable mean drives the state past the guard within a few steps.
        let model = scalar_model(ScalarKernel::squared_exponential(0.0, 1.0).unwrap(), 3.0, 1.0);
        let h = Horizon::new(30, v(&[1e90])).unwrap();
        match sample_trajectories(&model, &h, 1, 0) {
            Err(Error::NonFinite { step, .. }) => assert!((1..=25).contains(&step)),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
