//! Finite basis-function approximations of the GP and simulation with
//! explicit approximate function samples.
//!
//! A scalar GP is approximated as `f(x) = phi(x)^T theta` with `m` basis
//! functions and weights `theta ~ N(mu, Sigma)` (prior `N(0, I)`). Drawing a
//! weight vector gives an explicit function sample that stays frozen across a
//! rollout, so correlation between successive evaluations is preserved by
//! construction and a rollout costs `O(N m)` — no kernel evaluation against
//! the step history is ever needed.
//!
//! Constructions: random Fourier features for the squared-exponential kernel,
//! Nystrom eigenfunctions for arbitrary kernels from landmark points, the
//! exact linear-kernel feature, and a linear-gain wrapper that multiplies an
//! inner feature map by the state (product kernels).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::Horizon;
use crate::kernel::ScalarKernel;
use crate::linalg::{cholesky, CholFactor, GaussianDist, JitterPolicy, SymMatrix};
use crate::mean::MeanFn;
use crate::rng::{standard_normals, step_slot, substream, PARAM_SLOT};
use crate::sampler::{MethodTag, TrajectoryBatch, DIVERGENCE_LIMIT};

/// Relative eigenvalue floor for the Nystrom truncation.
const SPECTRUM_RTOL: f64 = 1e-12;

/// Whether an expansion models the zero-mean residual of the transition
/// function (rollout adds the mean separately) or the function itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpansionMode {
    Residual,
    Direct,
}

/// How the feature map was constructed.
#[derive(Debug, Clone)]
pub enum Provenance {
    /// Cosine features with frequencies from the SE spectral density.
    RandomFourier {
        frequencies: Vec<DVector<f64>>,
        phases: Vec<f64>,
        signal_std: f64,
    },
    /// Truncated eigenfunctions of the kernel gram on landmark points.
    Nystrom {
        kernel: ScalarKernel,
        landmarks: Vec<DVector<f64>>,
        /// Operator-level eigenvalues (gram eigenvalues divided by the
        /// landmark count), descending.
        eigenvalues: DVector<f64>,
        /// Unit-norm gram eigenvectors, one column per kept eigenpair.
        eigenvectors: DMatrix<f64>,
    },
    /// The exact features of the linear kernel: `phi_i(x) = s x_i`.
    LinearExact { signal_std: f64 },
    /// `phi_{(i,j)}(x) = x_i * inner_j(x)`; reconstructs `<x,y> k_inner`.
    LinearTimesBase { inner: Box<BasisExpansion> },
}

/// Finite feature map with a Gaussian weight distribution.
#[derive(Debug, Clone)]
pub struct BasisExpansion {
    input_dim: usize,
    basis_count: usize,
    weight_dist: GaussianDist,
    provenance: Provenance,
}

impl BasisExpansion {
    /// Random Fourier features for a squared-exponential kernel: `m` features
    /// `s sqrt(2/m) cos(w_i^T x + b_i)` with `w_i ~ N(0, lengthscale^-2 I)`
    /// and `b_i ~ U[0, 2 pi)`, so `E[phi(x)^T phi(y)] = k(x, y)`.
    pub fn random_fourier(kernel: &ScalarKernel, input_dim: usize, m: usize, seed: u64) -> Result<Self> {
        let (signal_std, lengthscale) = match kernel {
            ScalarKernel::SquaredExponential {
                signal_std,
                lengthscale,
            } => (*signal_std, *lengthscale),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "random Fourier features require a squared-exponential kernel, got {other:?}"
                )))
            }
        };
        if m == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument(
                "basis count and input dim must be at least 1".into(),
            ));
        }
        let mut rng = substream(seed, 0, PARAM_SLOT);
        let mut frequencies = Vec::with_capacity(m);
        let mut phases = Vec::with_capacity(m);
        for _ in 0..m {
            frequencies.push(standard_normals(&mut rng, input_dim) / lengthscale);
            phases.push(rng.random::<f64>() * std::f64::consts::TAU);
        }
        Ok(Self {
            input_dim,
            basis_count: m,
            weight_dist: GaussianDist::standard(m),
            provenance: Provenance::RandomFourier {
                frequencies,
                phases,
                signal_std,
            },
        })
    }

    /// Nystrom eigenfunction features from landmark points: the gram scaled
    /// by `1/p` is eigendecomposed and the top `m` eigenpairs kept
    /// (descending, signs fixed so each eigenvector's first nonzero component
    /// is positive). Features are scaled so `phi(x)^T phi(y)` approximates
    /// the kernel; with `m = p` the gram at the landmarks is reproduced
    /// exactly.
    pub fn nystrom(kernel: &ScalarKernel, landmarks: Vec<DVector<f64>>, m: usize) -> Result<Self> {
        let p = landmarks.len();
        if p == 0 || m == 0 {
            return Err(Error::InvalidArgument(
                "need at least one landmark and one basis function".into(),
            ));
        }
        if m > p {
            return Err(Error::InvalidArgument(format!(
                "basis count {m} exceeds landmark count {p}"
            )));
        }
        let input_dim = landmarks[0].len();
        if landmarks.iter().any(|x| x.len() != input_dim) {
            return Err(Error::InvalidArgument(
                "landmarks must share one input dimension".into(),
            ));
        }
        let gram = DMatrix::from_fn(p, p, |i, j| kernel.eval(&landmarks[i], &landmarks[j]));
        let gram = (&gram + gram.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(gram / p as f64);

        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .expect("finite eigenvalues")
        });
        let lambda_max = eig.eigenvalues[order[0]].max(0.0);
        let achievable = order
            .iter()
            .filter(|&&i| eig.eigenvalues[i] > SPECTRUM_RTOL * lambda_max)
            .count();
        if achievable < m {
            return Err(Error::DegenerateSpectrum {
                requested: m,
                achievable,
            });
        }

        let mut eigenvalues = DVector::zeros(m);
        let mut eigenvectors = DMatrix::zeros(p, m);
        for (col, &idx) in order.iter().take(m).enumerate() {
            eigenvalues[col] = eig.eigenvalues[idx];
            let mut v = eig.eigenvectors.column(idx).into_owned();
            let vmax = v.amax();
            if let Some(first) = v.iter().find(|c| c.abs() > 1e-14 * vmax) {
                if *first < 0.0 {
                    v.neg_mut();
                }
            }
            eigenvectors.set_column(col, &v);
        }
        Ok(Self {
            input_dim,
            basis_count: m,
            weight_dist: GaussianDist::standard(m),
            provenance: Provenance::Nystrom {
                kernel: kernel.clone(),
                landmarks,
                eigenvalues,
                eigenvectors,
            },
        })
    }

    /// Exact representation of the linear kernel: one feature per input
    /// coordinate, `phi_i(x) = s x_i`, reproducing `s^2 <x, y>` exactly.
    pub fn linear_exact(kernel: &ScalarKernel, input_dim: usize) -> Result<Self> {
        let signal_std = match kernel {
            ScalarKernel::Linear { signal_std } => *signal_std,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "exact linear features require a linear kernel, got {other:?}"
                )))
            }
        };
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input dim must be at least 1".into()));
        }
        Ok(Self {
            input_dim,
            basis_count: input_dim,
            weight_dist: GaussianDist::standard(input_dim),
            provenance: Provenance::LinearExact { signal_std },
        })
    }

    /// Multiplies an inner feature map by the state coordinates, giving
    /// features of the product of a (unit) linear kernel with the inner
    /// kernel. Fold any linear signal scale into the inner kernel.
    pub fn linear_times_base(inner: BasisExpansion) -> Result<Self> {
        let input_dim = inner.input_dim;
        let basis_count = input_dim * inner.basis_count;
        Ok(Self {
            input_dim,
            basis_count,
            weight_dist: GaussianDist::standard(basis_count),
            provenance: Provenance::LinearTimesBase {
                inner: Box::new(inner),
            },
        })
    }

    /// Rebuilds a random-Fourier expansion from persisted parts.
    pub fn from_random_fourier_parts(
        input_dim: usize,
        frequencies: Vec<DVector<f64>>,
        phases: Vec<f64>,
        signal_std: f64,
    ) -> Result<Self> {
        if frequencies.len() != phases.len() || frequencies.is_empty() {
            return Err(Error::InvalidArgument(
                "need matching, nonempty frequency and phase lists".into(),
            ));
        }
        if frequencies.iter().any(|f| f.len() != input_dim) {
            return Err(Error::DimensionMismatch {
                context: "from_random_fourier_parts",
                expected: input_dim,
                got: frequencies.iter().map(|f| f.len()).find(|&l| l != input_dim).unwrap_or(0),
            });
        }
        let m = frequencies.len();
        Ok(Self {
            input_dim,
            basis_count: m,
            weight_dist: GaussianDist::standard(m),
            provenance: Provenance::RandomFourier {
                frequencies,
                phases,
                signal_std,
            },
        })
    }

    /// Rebuilds a Nystrom expansion from persisted parts.
    pub fn from_nystrom_parts(
        kernel: ScalarKernel,
        landmarks: Vec<DVector<f64>>,
        eigenvalues: DVector<f64>,
        eigenvectors: DMatrix<f64>,
    ) -> Result<Self> {
        let p = landmarks.len();
        let m = eigenvalues.len();
        if p == 0 || m == 0 || eigenvectors.nrows() != p || eigenvectors.ncols() != m {
            return Err(Error::InvalidArgument(
                "inconsistent Nystrom parts (landmarks/eigenvalues/eigenvectors)".into(),
            ));
        }
        if eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument(
                "Nystrom eigenvalues must be positive".into(),
            ));
        }
        let input_dim = landmarks[0].len();
        Ok(Self {
            input_dim,
            basis_count: m,
            weight_dist: GaussianDist::standard(m),
            provenance: Provenance::Nystrom {
                kernel,
                landmarks,
                eigenvalues,
                eigenvectors,
            },
        })
    }

    /// Picks a construction for the given kernel: random Fourier features for
    /// SE, exact features for linear, and the linear-gain wrapper for
    /// products of a linear kernel with an SE or linear kernel.
    pub fn auto(kernel: &ScalarKernel, input_dim: usize, m: usize, seed: u64) -> Result<Self> {
        match kernel {
            ScalarKernel::SquaredExponential { .. } => {
                Self::random_fourier(kernel, input_dim, m, seed)
            }
            ScalarKernel::Linear { .. } => Self::linear_exact(kernel, input_dim),
            ScalarKernel::Product(left, right) => {
                let (lin_std, base) = match (left.as_ref(), right.as_ref()) {
                    (ScalarKernel::Linear { signal_std }, other) => (*signal_std, other),
                    (other, ScalarKernel::Linear { signal_std }) => (*signal_std, other),
                    _ => {
                        return Err(Error::InvalidArgument(
                            "no automatic basis construction for this product kernel; \
                             one factor must be linear"
                                .into(),
                        ))
                    }
                };
                let inner = match base {
                    ScalarKernel::SquaredExponential {
                        signal_std,
                        lengthscale,
                    } => Self::random_fourier(
                        &ScalarKernel::squared_exponential(signal_std * lin_std, *lengthscale)?,
                        input_dim,
                        m,
                        seed,
                    )?,
                    ScalarKernel::Linear { signal_std } => Self::linear_exact(
                        &ScalarKernel::linear(signal_std * lin_std)?,
                        input_dim,
                    )?,
                    ScalarKernel::Product(..) => {
                        return Err(Error::InvalidArgument(
                            "no automatic basis construction for nested product kernels".into(),
                        ))
                    }
                };
                Self::linear_times_base(inner)
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    pub fn weight_dist(&self) -> &GaussianDist {
        &self.weight_dist
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub(crate) fn with_weight_dist(mut self, dist: GaussianDist) -> Result<Self> {
        if dist.dim() != self.basis_count {
            return Err(Error::DimensionMismatch {
                context: "BasisExpansion weight distribution",
                expected: self.basis_count,
                got: dist.dim(),
            });
        }
        self.weight_dist = dist;
        Ok(self)
    }

    /// Evaluates the feature vector `phi(x)`.
    pub fn features(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "BasisExpansion::features",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(match &self.provenance {
            Provenance::RandomFourier {
                frequencies,
                phases,
                signal_std,
            } => {
                let scale = signal_std * (2.0 / self.basis_count as f64).sqrt();
                DVector::from_fn(self.basis_count, |i, _| {
                    scale * (frequencies[i].dot(x) + phases[i]).cos()
                })
            }
            Provenance::Nystrom {
                kernel,
                landmarks,
                eigenvalues,
                eigenvectors,
            } => {
                let p = landmarks.len() as f64;
                let kv = DVector::from_fn(landmarks.len(), |j, _| kernel.eval(x, &landmarks[j]));
                DVector::from_fn(self.basis_count, |i, _| {
                    kv.dot(&eigenvectors.column(i)) / (p * eigenvalues[i]).sqrt()
                })
            }
            Provenance::LinearExact { signal_std } => x * *signal_std,
            Provenance::LinearTimesBase { inner } => {
                let fi = inner.features(x)?;
                let mut out = DVector::zeros(self.basis_count);
                for i in 0..self.input_dim {
                    for j in 0..inner.basis_count {
                        out[i * inner.basis_count + j] = x[i] * fi[j];
                    }
                }
                out
            }
        })
    }

    /// Kernel value reconstructed by the expansion: `phi(x)^T phi(y)`.
    pub fn kernel_estimate(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        Ok(self.features(x)?.dot(&self.features(y)?))
    }

    /// Bayesian linear regression update of the weight distribution from
    /// scalar observations `y_j = phi(x_j)^T theta + e_j`, `e_j ~ N(0,
    /// noise_var)`.
    pub fn condition_weights(
        &self,
        train_x: &[DVector<f64>],
        train_y: &[f64],
        noise_var: f64,
    ) -> Result<Self> {
        if train_x.len() != train_y.len() {
            return Err(Error::DimensionMismatch {
                context: "condition_weights (point counts)",
                expected: train_x.len(),
                got: train_y.len(),
            });
        }
        if !(noise_var > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "observation noise variance must be positive, got {noise_var}"
            )));
        }
        if train_x.is_empty() {
            return Ok(self.clone());
        }
        let m = self.basis_count;
        let phi = {
            let mut phi = DMatrix::zeros(train_x.len(), m);
            for (r, x) in train_x.iter().enumerate() {
                phi.row_mut(r).copy_from(&self.features(x)?.transpose());
            }
            phi
        };
        // Posterior precision A = Sigma0^-1 + Phi^T Phi / q.
        let prior_factor = cholesky(self.weight_dist.cov(), JitterPolicy::default())?;
        let prior_precision = {
            let inv_l = prior_factor.solve_lower(&DMatrix::identity(m, m));
            inv_l.transpose() * inv_l
        };
        let a = &prior_precision + phi.transpose() * &phi / noise_var;
        let a_factor = cholesky(&SymMatrix::symmetrized(a), JitterPolicy::strict())?;
        let post_cov = {
            let inv_l = a_factor.solve_lower(&DMatrix::identity(m, m));
            inv_l.transpose() * inv_l
        };
        let rhs = &prior_precision * self.weight_dist.mean()
            + phi.transpose() * DVector::from_column_slice(train_y) / noise_var;
        let post_mean = a_factor.solve(&rhs);
        self.clone()
            .with_weight_dist(GaussianDist::new(post_mean, SymMatrix::symmetrized(post_cov))?)
    }

    /// Draws weight vectors from the weight distribution, one per sample,
    /// with the per-sample parameter substream.
    pub fn draw_function_samples(
        self: &Arc<Self>,
        count: usize,
        seed: u64,
    ) -> Result<Vec<FunctionSample>> {
        let factor = cholesky(self.weight_dist.cov(), JitterPolicy::default())?;
        (0..count)
            .map(|i| {
                let z = standard_normals(&mut substream(seed, i as u64, PARAM_SLOT), self.basis_count);
                let weights = self.weight_dist.mean() + factor.lower() * z;
                Ok(FunctionSample {
                    expansion: Arc::clone(self),
                    weights,
                })
            })
            .collect()
    }
}

/// An explicit approximate function sample: a drawn weight vector over a
/// feature map. Deterministic and cheap to evaluate anywhere.
#[derive(Debug, Clone)]
pub struct FunctionSample {
    expansion: Arc<BasisExpansion>,
    weights: DVector<f64>,
}

impl FunctionSample {
    pub fn new(expansion: Arc<BasisExpansion>, weights: DVector<f64>) -> Result<Self> {
        if weights.len() != expansion.basis_count() {
            return Err(Error::DimensionMismatch {
                context: "FunctionSample::new",
                expected: expansion.basis_count(),
                got: weights.len(),
            });
        }
        Ok(Self { expansion, weights })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn expansion(&self) -> &BasisExpansion {
        &self.expansion
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.expansion.features(x)?.dot(&self.weights))
    }
}

/// Independent per-output-dimension expansions for vector-valued systems.
#[derive(Debug, Clone)]
pub struct MultiOutputExpansion {
    per_dim: Vec<Arc<BasisExpansion>>,
}

impl MultiOutputExpansion {
    pub fn new(per_dim: Vec<BasisExpansion>) -> Result<Self> {
        if per_dim.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one output dimension required".into(),
            ));
        }
        let d = per_dim[0].input_dim();
        if per_dim.iter().any(|e| e.input_dim() != d) {
            return Err(Error::InvalidArgument(
                "per-dimension expansions must share one input dimension".into(),
            ));
        }
        Ok(Self {
            per_dim: per_dim.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn scalar(expansion: BasisExpansion) -> Self {
        Self {
            per_dim: vec![Arc::new(expansion)],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.per_dim.len()
    }

    pub fn input_dim(&self) -> usize {
        self.per_dim[0].input_dim()
    }

    pub fn component(&self, dim: usize) -> &BasisExpansion {
        &self.per_dim[dim]
    }

    /// One weight draw per output dimension, all from the sample's parameter
    /// substream (dimension 0 first).
    pub fn draw_samples(&self, count: usize, seed: u64) -> Result<Vec<MultiFunctionSample>> {
        let factors: Vec<CholFactor> = self
            .per_dim
            .iter()
            .map(|e| cholesky(e.weight_dist().cov(), JitterPolicy::default()))
            .collect::<Result<_>>()?;
        (0..count)
            .map(|i| {
                let mut rng = substream(seed, i as u64, PARAM_SLOT);
                let per_dim = self
                    .per_dim
                    .iter()
                    .zip(&factors)
                    .map(|(e, factor)| {
                        let z = standard_normals(&mut rng, e.basis_count());
                        FunctionSample {
                            expansion: Arc::clone(e),
                            weights: e.weight_dist().mean() + factor.lower() * z,
                        }
                    })
                    .collect();
                Ok(MultiFunctionSample { per_dim })
            })
            .collect()
    }
}

/// A drawn vector-valued function sample (one scalar sample per output dim).
#[derive(Debug, Clone)]
pub struct MultiFunctionSample {
    per_dim: Vec<FunctionSample>,
}

impl MultiFunctionSample {
    pub fn scalar(sample: FunctionSample) -> Self {
        Self {
            per_dim: vec![sample],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.per_dim.len()
    }

    pub fn component(&self, dim: usize) -> &FunctionSample {
        &self.per_dim[dim]
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.per_dim.len());
        for (d, s) in self.per_dim.iter().enumerate() {
            out[d] = s.evaluate(x)?;
        }
        Ok(out)
    }
}

/// Simulates one trajectory per function sample, the sampled function frozen
/// for all steps. In `Residual` mode the rollout is
/// `x_{k+1} = mean(x_k) + f_i(x_k) + w_k`; in `Direct` mode the sample
/// replaces the transition function entirely. An exactly-zero noise
/// covariance skips the disturbance term.
pub fn simulate_with_function_samples(
    mean: &MeanFn,
    samples: &[MultiFunctionSample],
    horizon: &Horizon,
    noise_cov: &SymMatrix,
    seed: u64,
    mode: ExpansionMode,
) -> Result<TrajectoryBatch> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("at least one function sample required".into()));
    }
    let n = match mode {
        ExpansionMode::Residual => mean.out_dim(),
        ExpansionMode::Direct => samples[0].out_dim(),
    };
    if samples.iter().any(|s| s.out_dim() != n) {
        return Err(Error::DimensionMismatch {
            context: "simulate_with_function_samples (sample output dim)",
            expected: n,
            got: samples.iter().map(|s| s.out_dim()).find(|&d| d != n).unwrap_or(n),
        });
    }
    if horizon.initial_state().len() != n {
        return Err(Error::DimensionMismatch {
            context: "simulate_with_function_samples (initial state)",
            expected: n,
            got: horizon.initial_state().len(),
        });
    }
    if noise_cov.dim() != n {
        return Err(Error::DimensionMismatch {
            context: "simulate_with_function_samples (noise covariance)",
            expected: n,
            got: noise_cov.dim(),
        });
    }
    let noise_factor = if noise_cov.is_zero() {
        None
    } else {
        Some(cholesky(noise_cov, JitterPolicy::default())?)
    };
    let steps = horizon.steps();
    let states: Result<Vec<DMatrix<f64>>> = samples
        .par_iter()
        .enumerate()
        .map(|(traj, sample)| {
            let mut m = DMatrix::zeros(steps + 1, n);
            let mut x = horizon.initial_state().clone();
            m.row_mut(0).copy_from(&x.transpose());
            for k in 0..steps {
                let mut next = sample.evaluate(&x)?;
                if mode == ExpansionMode::Residual {
                    next += mean.eval(&x)?;
                }
                if let Some(factor) = &noise_factor {
                    let z = standard_normals(&mut substream(seed, traj as u64, step_slot(k)), n);
                    next += factor.lower() * z;
                }
                if !next.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT) {
                    return Err(Error::NonFinite {
                        trajectory: traj,
                        step: k + 1,
                        limit: DIVERGENCE_LIMIT,
                    });
                }
                m.row_mut(k + 1).copy_from(&next.transpose());
                x = next;
            }
            Ok(m)
        })
        .collect();
    Ok(TrajectoryBatch::from_parts(
        MethodTag::ApproxFunctionSample,
        seed,
        n,
        steps,
        false,
        states?,
    ))
}
