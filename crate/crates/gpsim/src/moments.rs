//! Direct Gaussian approximation of the trajectory distribution.
//!
//! The joint method linearizes the mean function along the deterministic mean
//! chain and evaluates the kernel at the chain (zero-order), which yields a
//! full trajectory covariance `A (k(M, M) + I (x) Q) A^T` with a lower
//! block-triangular gradient-product matrix `A` — correlations between
//! function evaluations at different steps are kept. The baseline propagates
//! the same linearization under a block-diagonal covariance, i.e. successive
//! function evaluations treated as independent, which is the established
//! scheme this crate exists to contrast.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp::{GpModel, Horizon};
use crate::linalg::{cholesky, JitterPolicy, SymMatrix};
use crate::sampler::DIVERGENCE_LIMIT;

/// Which propagation scheme produced a moment sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentMethod {
    LinearizedJoint,
    IndependenceBaseline,
}

/// Trajectory covariance: the joint method materializes the full matrix over
/// steps `1..=N`; the baseline stores per-step blocks.
#[derive(Debug, Clone)]
pub enum TrajectoryCovariance {
    Full(SymMatrix),
    BlockDiagonal(Vec<SymMatrix>),
}

/// Per-step means and trajectory covariance from moment propagation.
#[derive(Debug, Clone)]
pub struct MomentSequence {
    state_dim: usize,
    steps: usize,
    /// `N + 1` mean vectors; entry 0 is the initial state.
    means: Vec<DVector<f64>>,
    cov: TrajectoryCovariance,
    method: MomentMethod,
}

impl MomentSequence {
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn method(&self) -> MomentMethod {
        self.method
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &TrajectoryCovariance {
        &self.cov
    }

    /// Per-step `(mean, n x n variance)` for steps `1..=N`: the diagonal
    /// blocks of the trajectory covariance paired with the means.
    pub fn marginals(&self) -> Vec<(DVector<f64>, SymMatrix)> {
        let n = self.state_dim;
        (1..=self.steps)
            .map(|k| {
                let var = match &self.cov {
                    TrajectoryCovariance::Full(c) => SymMatrix::symmetrized(
                        c.entries().view(((k - 1) * n, (k - 1) * n), (n, n)).into_owned(),
                    ),
                    TrajectoryCovariance::BlockDiagonal(blocks) => blocks[k - 1].clone(),
                };
                (self.means[k].clone(), var)
            })
            .collect()
    }
}

/// Builds the deterministic mean chain `mu_0 = x0`, `mu_{k+1} = mean(mu_k)`
/// (controlled: `mean([mu_k; u_k])`), with a divergence guard.
fn mean_chain(
    model: &GpModel,
    horizon: &Horizon,
    inputs: Option<&[DVector<f64>]>,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let n = model.state_dim();
    if horizon.initial_state().len() != n {
        return Err(Error::DimensionMismatch {
            context: "moment propagation (initial state)",
            expected: n,
            got: horizon.initial_state().len(),
        });
    }
    let mut means = vec![horizon.initial_state().clone()];
    let mut points = Vec::with_capacity(horizon.steps());
    for k in 0..horizon.steps() {
        let z = match inputs {
            None => means[k].clone(),
            Some(us) => {
                let mut z = DVector::zeros(n + us[k].len());
                z.rows_mut(0, n).copy_from(&means[k]);
                z.rows_mut(n, us[k].len()).copy_from(&us[k]);
                z
            }
        };
        let next = model.posterior_mean(&z)?;
        if !next.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT) {
            return Err(Error::NonFinite {
                trajectory: 0,
                step: k + 1,
                limit: DIVERGENCE_LIMIT,
            });
        }
        points.push(z);
        means.push(next);
    }
    Ok((means, points))
}

/// Lower block-triangular gradient-product matrix.
///
/// Block `(i, j)` (zero-based, covering states `x_{1..N}`) is the product of
/// the mean Jacobians along the chain between steps `j` and `i`; diagonal
/// blocks are the identity.
#[derive(Debug, Clone)]
pub struct GradientChain {
    state_dim: usize,
    steps: usize,
    matrix: DMatrix<f64>,
}

impl GradientChain {
    /// Builds the chain from the Jacobians `grad[l] = d mean / d state` at
    /// chain points `1..N-1` via the recursion
    /// `A[i][j] = grad[i] * A[i-1][j]`.
    pub fn from_jacobians(jacobians: &[DMatrix<f64>], state_dim: usize, steps: usize) -> Self {
        assert_eq!(jacobians.len(), steps.saturating_sub(1));
        let n = state_dim;
        let mut a = DMatrix::zeros(steps * n, steps * n);
        for i in 0..steps {
            a.view_mut((i * n, i * n), (n, n))
                .copy_from(&DMatrix::identity(n, n));
            for j in 0..i {
                let prev = a.view(((i - 1) * n, j * n), (n, n)).into_owned();
                let block = &jacobians[i - 1] * prev;
                a.view_mut((i * n, j * n), (n, n)).copy_from(&block);
            }
        }
        Self {
            state_dim,
            steps,
            matrix: a,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.state_dim;
        self.matrix.view((i * n, j * n), (n, n)).into_owned()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// State-Jacobians of the effective mean along the chain points `1..N-1`.
fn chain_jacobians(
    model: &GpModel,
    points: &[DVector<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let n = model.state_dim();
    points
        .iter()
        .skip(1)
        .map(|z| {
            let full = model.posterior_mean_jacobian(z)?;
            // Controlled chains carry [x; u] points; only the state block
            // enters the gradient products.
            Ok(full.columns(0, n).into_owned())
        })
        .collect()
}

fn assemble_gram(model: &GpModel, points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let n = model.state_dim();
    let mut gram = model.posterior_gram_self(points)?;
    for i in 0..points.len() {
        let mut block = gram.view_mut((i * n, i * n), (n, n));
        block += model.noise_cov().entries();
    }
    Ok(gram)
}

/// Repairs round-off indefiniteness: if the matrix fails the jitter check,
/// floor its eigenvalues at zero.
fn ensure_psd(m: DMatrix<f64>) -> SymMatrix {
    let sym = SymMatrix::symmetrized(m);
    if cholesky(&sym, JitterPolicy::default()).is_ok() {
        return sym;
    }
    log::warn!(
        "propagated covariance failed the factorization check; flooring eigenvalues at zero"
    );
    let eig = nalgebra::SymmetricEigen::new(sym.entries().clone());
    let floored = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)));
    SymMatrix::symmetrized(&eig.eigenvectors * floored * eig.eigenvectors.transpose())
}

fn propagate_linearized_impl(
    model: &GpModel,
    horizon: &Horizon,
    inputs: Option<&[DVector<f64>]>,
) -> Result<MomentSequence> {
    let n = model.state_dim();
    let steps = horizon.steps();
    let (means, points) = mean_chain(model, horizon, inputs)?;
    let gram = assemble_gram(model, &points)?;
    let chain = GradientChain::from_jacobians(&chain_jacobians(model, &points)?, n, steps);
    let cov = chain.matrix() * gram * chain.matrix().transpose();
    Ok(MomentSequence {
        state_dim: n,
        steps,
        means,
        cov: TrajectoryCovariance::Full(ensure_psd(cov)),
        method: MomentMethod::LinearizedJoint,
    })
}

/// Correlation-aware propagation: full trajectory covariance
/// `A (k(M, M) + I (x) Q) A^T` around the mean chain `M`. No factorization of
/// the trajectory covariance is required.
pub fn propagate_linearized(model: &GpModel, horizon: &Horizon) -> Result<MomentSequence> {
    propagate_linearized_impl(model, horizon, None)
}

/// Controlled-system variant: the mean chain is driven by the input sequence
/// and the gradient products use the partial state-Jacobians only.
pub fn propagate_linearized_controlled(
    model: &GpModel,
    horizon: &Horizon,
    inputs: &[DVector<f64>],
) -> Result<MomentSequence> {
    if inputs.len() != horizon.steps() {
        return Err(Error::DimensionMismatch {
            context: "propagate_linearized_controlled (input rows)",
            expected: horizon.steps(),
            got: inputs.len(),
        });
    }
    propagate_linearized_impl(model, horizon, Some(inputs))
}

/// Independence-assumption baseline: identical mean chain and linearization,
/// but function evaluations at different steps are treated as uncorrelated,
/// so only per-step blocks `S_{k+1} = J S_k J^T + k(mu_k, mu_k) + Q` are
/// propagated (block-diagonal trajectory covariance).
pub fn propagate_independent(model: &GpModel, horizon: &Horizon) -> Result<MomentSequence> {
    let n = model.state_dim();
    let steps = horizon.steps();
    let (means, points) = mean_chain(model, horizon, None)?;
    let mut blocks = Vec::with_capacity(steps);
    let mut current = DMatrix::zeros(n, n);
    for (k, z) in points.iter().enumerate() {
        let jac = model.posterior_mean_jacobian(z)?;
        let mut next = &jac * &current * jac.transpose();
        next += model.posterior_kernel(z, z)?;
        next += model.noise_cov().entries();
        let repaired = ensure_psd(next);
        current = repaired.entries().clone();
        blocks.push(repaired);
        let _ = k;
    }
    Ok(MomentSequence {
        state_dim: n,
        steps,
        means,
        cov: TrajectoryCovariance::BlockDiagonal(blocks),
        method: MomentMethod::IndependenceBaseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{MatrixKernel, ScalarKernel};
    use crate::mean::MeanFn;
    use crate::proxy::{proxy_moments_closed_form, ProxySpec, ProxyVariant};
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
    fn degenerate_model_has_zero_covariance() {
        let model = scalar_model(ScalarKernel::squared_exponential(0.0, 1.0).unwrap(), 0.95, 0.0);
        let h = Horizon::new(5, v(&[1.0])).unwrap();
        for ms in [
            propagate_linearized(&model, &h).unwrap(),
            propagate_independent(&model, &h).unwrap(),
        ] {
            for (mean, var) in ms.marginals() {
                assert!(var.entries().amax() == 0.0);
                assert!(mean[0] > 0.0);
            }
            let mut expect = 1.0;
            for k in 1..=5 {
                expect *= 0.95;
                assert_relative_eq!(ms.means()[k][0], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn single_step_matches_exact_marginal_for_both_methods() {
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 2.0).unwrap(), 0.95, 0.5);
        let h = Horizon::new(1, v(&[2.0])).unwrap();
        let joint = propagate_linearized(&model, &h).unwrap();
        let indep = propagate_independent(&model, &h).unwrap();
        for ms in [&joint, &indep] {
            let m = ms.marginals();
            assert_eq!(m.len(), 1);
            assert_relative_eq!(m[0].0[0], 1.9, epsilon = 1e-12);
            assert_relative_eq!(m[0].1.entries()[(0, 0)], 1.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn linearized_is_exact_in_the_constant_kernel_limit() {
        // Linear mean and (numerically) constant kernel: the linearization is
        // exact, so per-step variances equal the persistent-offset closed form.
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 1e6).unwrap(), 0.95, 1.0);
        let h = Horizon::new(50, v(&[1.0])).unwrap();
        let ms = propagate_linearized(&model, &h).unwrap();
        let spec = ProxySpec::new(ProxyVariant::ConstantOffset, 0.95, 1.0, 1.0, 1.0, 50).unwrap();
        let cf = proxy_moments_closed_form(&spec);
        for (k, (mean, var)) in ms.marginals().iter().enumerate() {
            let (cm, cv) = cf[k + 1];
            assert_relative_eq!(mean[0], cm, epsilon = 1e-12);
            assert!(
                (var.entries()[(0, 0)] - cv).abs() / cv < 1e-6,
                "step {}: {} vs {}",
                k + 1,
                var.entries()[(0, 0)],
                cv
            );
        }
    }

    #[test]
    fn baseline_accumulates_iid_variance_and_underestimates() {
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 1e6).unwrap(), 0.95, 1.0);
        let h = Horizon::new(50, v(&[1.0])).unwrap();
        let indep = propagate_independent(&model, &h).unwrap();
        // Same accumulation as the i.i.d.-noise closed form with sf^2 + Q per step.
        let spec = ProxySpec::new(ProxyVariant::AdditiveNoise, 0.95, 1.0, 1.0, 1.0, 50).unwrap();
        let cf = proxy_moments_closed_form(&spec);
        let marg = indep.marginals();
        for (k, (_, var)) in marg.iter().enumerate() {
            assert!(
                (var.entries()[(0, 0)] - cf[k + 1].1).abs() / cf[k + 1].1 < 1e-6,
                "step {}",
                k + 1
            );
        }
        // Underestimation: terminal baseline variance below half the joint value.
        let joint = propagate_linearized(&model, &h).unwrap();
        let vj = joint.marginals()[49].1.entries()[(0, 0)];
        let vi = marg[49].1.entries()[(0, 0)];
        assert!(vi < 0.5 * vj, "baseline {vi} vs joint {vj}");
    }

    #[test]
    fn methods_coincide_when_chain_points_decorrelate() {
        // A tiny lengthscale makes the kernel vanish between distinct chain
        // points, so both methods return the same marginals.
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 1e-3).unwrap(), 0.5, 0.2);
        let h = Horizon::new(8, v(&[5.0])).unwrap();
        let joint = propagate_linearized(&model, &h).unwrap();
        let indep = propagate_independent(&model, &h).unwrap();
        for ((_, a), (_, b)) in joint.marginals().iter().zip(indep.marginals().iter()) {
            assert!((a.entries()[(0, 0)] - b.entries()[(0, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_chain_recursion_holds_structurally() {
        let model = GpModel::new(
            MeanFn::callback_with_jacobian(
                2,
                |x| v(&[0.9 * x[0] + 0.1 * x[1] * x[1], (0.5 * x[0]).sin()]),
                |x| dmatrix![0.9, 0.2 * x[1]; 0.5 * (0.5 * x[0]).cos(), 0.0],
            ),
            MatrixKernel::independent(vec![
                ScalarKernel::squared_exponential(0.3, 1.0).unwrap(),
                ScalarKernel::squared_exponential(0.2, 2.0).unwrap(),
            ])
            .unwrap(),
            SymMatrix::symmetrized(DMatrix::identity(2, 2) * 0.1),
        )
        .unwrap();
        let h = Horizon::new(6, v(&[0.4, -0.2])).unwrap();
        let (_, points) = mean_chain(&model, &h, None).unwrap();
        let jacs = chain_jacobians(&model, &points).unwrap();
        let chain = GradientChain::from_jacobians(&jacs, 2, 6);
        for i in 1..6 {
            for j in 0..i {
                let expect = &jacs[i - 1] * chain.block(i - 1, j);
                assert_relative_eq!(chain.block(i, j), expect, epsilon = 1e-14);
            }
            assert_eq!(chain.block(i, i), DMatrix::identity(2, 2));
        }
        // Jacobians along the chain agree with finite differences of the mean.
        for z in points.iter().skip(1) {
            let analytic = model.posterior_mean_jacobian(z).unwrap();
            let fd = crate::mean::finite_difference_jacobian(
                |p| model.posterior_mean(p),
                z,
                2,
            )
            .unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    assert_relative_eq!(analytic[(r, c)], fd[(r, c)], max_relative = 1e-5, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn controlled_zero_inputs_match_autonomous() {
        let controlled = GpModel::new(
            MeanFn::linear(dmatrix![0.95, 0.7]),
            MatrixKernel::scalar(ScalarKernel::squared_exponential(1.0, 3.0).unwrap()),
            SymMatrix::scalar(0.4),
        )
        .unwrap();
        let autonomous = GpModel::new(
            MeanFn::linear(dmatrix![0.95]),
            MatrixKernel::scalar(ScalarKernel::squared_exponential(1.0, 3.0).unwrap()),
            SymMatrix::scalar(0.4),
        )
        .unwrap();
        let h = Horizon::new(10, v(&[1.0])).unwrap();
        let zeros: Vec<DVector<f64>> = (0..10).map(|_| v(&[0.0])).collect();
        let a = propagate_linearized_controlled(&controlled, &h, &zeros).unwrap();
        let b = propagate_linearized(&autonomous, &h).unwrap();
        for (ka, kb) in a.marginals().iter().zip(b.marginals().iter()) {
            assert!((ka.0[0] - kb.0[0]).abs() < 1e-12);
            assert!((ka.1.entries()[(0, 0)] - kb.1.entries()[(0, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn controlled_forced_linear_recursion_mean_chain() {
        let model = GpModel::new(
            MeanFn::linear(dmatrix![0.95, 1.0]),
            MatrixKernel::scalar(ScalarKernel::squared_exponential(1.0, 1e6).unwrap()),
            SymMatrix::scalar(0.0),
        )
        .unwrap();
        let h = Horizon::new(5, v(&[1.0])).unwrap();
        let inputs: Vec<DVector<f64>> = (0..5).map(|k| v(&[0.2 * k as f64])).collect();
        let ms = propagate_linearized_controlled(&model, &h, &inputs).unwrap();
        let mut expect = 1.0;
        for k in 0..5 {
            expect = 0.95 * expect + 0.2 * k as f64;
            assert_relative_eq!(ms.means()[k + 1][0], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn input_only_kernel_gives_state_independent_blocks() {
        // Kernel that ignores the state coordinate entirely: covariance blocks
        // must not depend on the state chain.
        let base = ScalarKernel::squared_exponential(0.8, 1.5).unwrap();
        let kernel_fn = move |z: &DVector<f64>, z2: &DVector<f64>| {
            base.eval(&v(&[z[1]]), &v(&[z2[1]]))
        };
        // Emulate via a callback-free route: evaluate twice with different x0
        // and compare the propagated covariances.
        let _ = kernel_fn;
        let model = GpModel::new(
            MeanFn::linear(dmatrix![0.95, 1.0]),
            // Lengthscale so large that the state contribution is flat.
            MatrixKernel::scalar(ScalarKernel::squared_exponential(1.0, 1e8).unwrap()),
            SymMatrix::scalar(0.1),
        )
        .unwrap();
        let inputs: Vec<DVector<f64>> = (0..6).map(|k| v(&[(k as f64) * 0.3])).collect();
        let a = propagate_linearized_controlled(&model, &Horizon::new(6, v(&[1.0])).unwrap(), &inputs).unwrap();
        let b = propagate_linearized_controlled(&model, &Horizon::new(6, v(&[2.0])).unwrap(), &inputs).unwrap();
        for (ka, kb) in a.marginals().iter().zip(b.marginals().iter()) {
            assert!((ka.1.entries()[(0, 0)] - kb.1.entries()[(0, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn marginals_single_step_equals_full_cov() {
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 1.0).unwrap(), 0.9, 0.2);
        let h = Horizon::new(1, v(&[0.5])).unwrap();
        let ms = propagate_linearized(&model, &h).unwrap();
        let marg = ms.marginals();
        assert_eq!(marg.len(), 1);
        match ms.covariance() {
            TrajectoryCovariance::Full(c) => {
                assert_eq!(marg[0].1.entries()[(0, 0)], c.entries()[(0, 0)]);
            }
            _ => panic!("joint method stores the full covariance"),
        }
    }

    #[test]
    fn marginal_blocks_are_psd() {
        let model = scalar_model(ScalarKernel::squared_exponential(1.0, 5.0).unwrap(), 0.95, 0.3);
        let h = Horizon::new(12, v(&[1.0])).unwrap();
        let ms = propagate_linearized(&model, &h).unwrap();
        for (_, var) in ms.marginals() {
            assert!(cholesky(&var, JitterPolicy::default()).is_ok());
        }
    }
}
