//! Transition model: a prior or data-conditioned GP with process noise.
//!
//! Conditioning caches a single factorization of the training gram; posterior
//! mean and covariance queries then cost two triangular solves. Downstream
//! consumers (samplers, moment propagation) only see the effective mean and
//! kernel, so they work identically on prior and conditioned models.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::MatrixKernel;
use crate::linalg::{cholesky, CholFactor, GaussianDist, JitterPolicy, SymMatrix};
use crate::mean::{finite_difference_jacobian, MeanFn};

/// Prediction horizon: number of steps and the initial state.
#[derive(Debug, Clone)]
pub struct Horizon {
    steps: usize,
    initial_state: DVector<f64>,
}

impl Horizon {
    pub fn new(steps: usize, initial_state: DVector<f64>) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1 step".into()));
        }
        Ok(Self {
            steps,
            initial_state,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.initial_state
    }
}

#[derive(Debug, Clone)]
struct TrainingData {
    inputs: Vec<DVector<f64>>,
    /// Factor of `k(X, X) + I (x) Q`.
    factor: CholFactor,
    /// `(k(X, X) + I (x) Q)^-1 (Y - mean(X))`.
    resid_weights: DVector<f64>,
}

/// Gaussian process transition model with i.i.d. process noise.
#[derive(Debug, Clone)]
pub struct GpModel {
    mean: MeanFn,
    kernel: MatrixKernel,
    noise_cov: SymMatrix,
    data: Option<TrainingData>,
}

impl GpModel {
    /// Builds a prior model. `noise_cov` must be an `n x n` PSD matrix for
    /// the kernel's output dimension `n`.
    pub fn new(mean: MeanFn, kernel: MatrixKernel, noise_cov: SymMatrix) -> Result<Self> {
        let n = kernel.out_dim();
        if mean.out_dim() != n {
            return Err(Error::DimensionMismatch {
                context: "GpModel::new (mean output)",
                expected: n,
                got: mean.out_dim(),
            });
        }
        if noise_cov.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "GpModel::new (noise covariance)",
                expected: n,
                got: noise_cov.dim(),
            });
        }
        // PSD check; the zero matrix is fine (noise-free model).
        if !noise_cov.is_zero() {
            cholesky(&noise_cov, JitterPolicy::default())?;
        }
        Ok(Self {
            mean,
            kernel,
            noise_cov,
            data: None,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.kernel.out_dim()
    }

    pub fn mean(&self) -> &MeanFn {
        &self.mean
    }

    pub fn kernel(&self) -> &MatrixKernel {
        &self.kernel
    }

    pub fn noise_cov(&self) -> &SymMatrix {
        &self.noise_cov
    }

    pub fn is_conditioned(&self) -> bool {
        self.data.is_some()
    }

    /// Training gram `k(X, X) + I (x) Q`.
    fn training_gram(&self, inputs: &[DVector<f64>]) -> Result<SymMatrix> {
        let n = self.state_dim();
        let mut gram = self.kernel.gram_self(inputs)?;
        for i in 0..inputs.len() {
            let mut block = gram.view_mut((i * n, i * n), (n, n));
            block += self.noise_cov.entries();
        }
        Ok(SymMatrix::symmetrized(gram))
    }

    /// Conditions the model on observed transitions, returning a new model.
    /// Conditioning on no data returns the model unchanged.
    pub fn condition(&self, inputs: Vec<DVector<f64>>, outputs: Vec<DVector<f64>>) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::DimensionMismatch {
                context: "GpModel::condition (point counts)",
                expected: inputs.len(),
                got: outputs.len(),
            });
        }
        if inputs.is_empty() {
            return Ok(self.clone());
        }
        let n = self.state_dim();
        for y in &outputs {
            if y.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "GpModel::condition (output dim)",
                    expected: n,
                    got: y.len(),
                });
            }
        }
        let gram = self.training_gram(&inputs)?;
        let factor = cholesky(&gram, JitterPolicy::default())?;
        let mut resid = DVector::zeros(inputs.len() * n);
        for (i, (x, y)) in inputs.iter().zip(&outputs).enumerate() {
            resid.rows_mut(i * n, n).copy_from(&(y - self.mean.eval(x)?));
        }
        let resid_weights = factor.solve(&resid);
        Ok(Self {
            mean: self.mean.clone(),
            kernel: self.kernel.clone(),
            noise_cov: self.noise_cov.clone(),
            data: Some(TrainingData {
                inputs,
                factor,
                resid_weights,
            }),
        })
    }

    /// Effective (posterior) mean at `x`; the prior mean when unconditioned.
    pub fn posterior_mean(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let prior = self.mean.eval(x)?;
        match &self.data {
            None => Ok(prior),
            Some(td) => {
                let cross = self.kernel.gram(&td.inputs, std::slice::from_ref(x))?;
                Ok(prior + cross.transpose() * &td.resid_weights)
            }
        }
    }

    /// Effective (posterior) kernel block `k(x, x2)`; the prior kernel when
    /// unconditioned.
    pub fn posterior_kernel(&self, x: &DVector<f64>, x2: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.posterior_gram(std::slice::from_ref(x), std::slice::from_ref(x2))
    }

    /// Effective gram between two stacked point sets, `(p*n) x (q*n)`.
    pub fn posterior_gram(&self, xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let prior = self.kernel.gram(xs, ys)?;
        match &self.data {
            None => Ok(prior),
            Some(td) => {
                let cx = self.kernel.gram(&td.inputs, xs)?;
                let cy = self.kernel.gram(&td.inputs, ys)?;
                let vx = td.factor.solve_lower(&cx);
                let vy = td.factor.solve_lower(&cy);
                Ok(prior - vx.transpose() * vy)
            }
        }
    }

    /// Jacobian of the effective mean at `x`. Analytic for prior models;
    /// conditioned models fall back to central finite differences of the
    /// posterior mean.
    pub fn posterior_mean_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.data {
            None => self.mean.jacobian(x),
            Some(_) => {
                finite_difference_jacobian(|p| self.posterior_mean(p), x, self.state_dim())
            }
        }
    }

    /// Effective gram over stacked points, mirrored to exact symmetry.
    pub fn posterior_gram_self(&self, xs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let prior = self.kernel.gram_self(xs)?;
        match &self.data {
            None => Ok(prior),
            Some(td) => {
                let cross = self.kernel.gram(&td.inputs, xs)?;
                let v = td.factor.solve_lower(&cross);
                let mut out = prior;
                out -= v.transpose() * &v;
                // Mirror for exact symmetry.
                Ok((&out + out.transpose()) * 0.5)
            }
        }
    }

    /// Effective mean stacked over points.
    pub fn posterior_mean_stacked(&self, xs: &[DVector<f64>]) -> Result<DVector<f64>> {
        match &self.data {
            None => self.mean.eval_stacked(xs),
            Some(td) => {
                let n = self.state_dim();
                let prior = self.mean.eval_stacked(xs)?;
                let cross = self.kernel.gram(&td.inputs, xs)?;
                let _ = n;
                Ok(prior + cross.transpose() * &td.resid_weights)
            }
        }
    }

    /// Joint Gaussian over the successors of the visited points: mean
    /// `mu(X_{0:k})` stacked and covariance `k(X_{0:k}, X_{0:k}) + I (x) Q`.
    /// Both samplers and the moment methods derive from this object.
    pub fn joint_step_distribution(&self, visited: &[DVector<f64>]) -> Result<GaussianDist> {
        if visited.is_empty() {
            return Err(Error::InvalidArgument(
                "joint_step_distribution needs at least one visited point".into(),
            ));
        }
        let n = self.state_dim();
        let mean = self.posterior_mean_stacked(visited)?;
        let mut cov = self.posterior_gram_self(visited)?;
        for i in 0..visited.len() {
            let mut block = cov.view_mut((i * n, i * n), (n, n));
            block += self.noise_cov.entries();
        }
        GaussianDist::new(mean, SymMatrix::symmetrized(cov))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ScalarKernel;
    use crate::linalg::gaussian_condition;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn v(vals: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(vals)
    }

    fn se_model(signal_std: f64, lengthscale: f64, noise_var: f64) -> GpModel {
        GpModel::new(
            MeanFn::scalar_gain(0.95),
            MatrixKernel::scalar(ScalarKernel::squared_exponential(signal_std, lengthscale).unwrap()),
            SymMatrix::scalar(noise_var),
        )
        .unwrap()
    }

    #[test]
    fn conditioning_on_nothing_is_identity() {
        let m = se_model(1.0, 1.0, 0.1);
        let c = m.condition(vec![], vec![]).unwrap();
        assert!(!c.is_conditioned());
        let x = v(&[0.4]);
        assert_eq!(c.posterior_mean(&x).unwrap(), m.mean().eval(&x).unwrap());
        assert_eq!(
            c.posterior_kernel(&x, &x).unwrap(),
            m.kernel().eval(&x, &x).unwrap()
        );
    }

    #[test]
    fn near_noise_free_observation_is_interpolated() {
        let m = se_model(1.0, 1.0, 0.0);
        let x = v(&[0.5]);
        let y = v(&[2.0]);
        let c = m.condition(vec![x.clone()], vec![y.clone()]).unwrap();
        let pm = c.posterior_mean(&x).unwrap();
        let pv = c.posterior_kernel(&x, &x).unwrap();
        // Q = 0 engages the jitter ladder: interpolation up to jitter scale.
        assert_relative_eq!(pm[0], y[0], epsilon = 1e-5);
        assert!(pv[(0, 0)].abs() < 1e-5);
    }

    #[test]
    fn posterior_matches_brute_force_joint_conditioning() {
        let m = se_model(1.2, 2.0, 0.3);
        let train_x = vec![v(&[-1.0]), v(&[0.5]), v(&[2.0])];
        let train_y = vec![v(&[0.2]), v(&[1.0]), v(&[-0.4])];
        let query = v(&[0.9]);

        let c = m.condition(train_x.clone(), train_y.clone()).unwrap();
        let pm = c.posterior_mean(&query).unwrap();
        let pk = c.posterior_kernel(&query, &query).unwrap();

        // Brute force: joint Gaussian over (train values, query value) with the
        // process noise on the training block, conditioned on the train values.
        let mut pts = train_x.clone();
        pts.push(query.clone());
        let gram = m.kernel().gram_self(&pts).unwrap();
        let mut mean = DVector::zeros(4);
        for (i, p) in pts.iter().enumerate() {
            mean[i] = m.mean().eval(p).unwrap()[0];
        }
        let joint = GaussianDist::new(mean, SymMatrix::symmetrized(gram)).unwrap();
        let obs = v(&[train_y[0][0], train_y[1][0], train_y[2][0]]);
        let noise = SymMatrix::symmetrized(DMatrix::identity(3, 3) * 0.3);
        let post = gaussian_condition(&joint, &[0, 1, 2], &obs, &noise).unwrap();

        assert_relative_eq!(pm[0], post.mean()[0], epsilon = 1e-8);
        assert_relative_eq!(pk[(0, 0)], post.cov().entries()[(0, 0)], epsilon = 1e-8);
    }

    #[test]
    fn posterior_variance_never_exceeds_prior() {
        let m = se_model(1.0, 1.5, 0.2);
        let c = m
            .condition(vec![v(&[0.0]), v(&[1.0])], vec![v(&[0.3]), v(&[0.6])])
            .unwrap();
        for q in [-2.0, 0.2, 0.7, 3.0] {
            let x = v(&[q]);
            let prior = m.kernel().eval(&x, &x).unwrap()[(0, 0)];
            let post = c.posterior_kernel(&x, &x).unwrap()[(0, 0)];
            assert!(post <= prior + 1e-12, "post {post} > prior {prior} at {q}");
        }
    }

    #[test]
    fn posterior_trace_decreases_with_more_data() {
        let m = se_model(1.0, 1.5, 0.2);
        let x = v(&[0.4]);
        let pts = [v(&[0.0]), v(&[0.8]), v(&[-0.5]), v(&[1.5])];
        let ys = [v(&[0.1]), v(&[0.2]), v(&[0.0]), v(&[0.3])];
        let mut last = m.kernel().eval(&x, &x).unwrap()[(0, 0)];
        for k in 1..=pts.len() {
            let c = m
                .condition(pts[..k].to_vec(), ys[..k].to_vec())
                .unwrap();
            let tr = c.posterior_kernel(&x, &x).unwrap()[(0, 0)];
            assert!(tr <= last + 1e-12);
            last = tr;
        }
    }

    #[test]
    fn two_point_posterior_matches_explicit_solve() {
        // Scalar SE case solved with an explicit 2x2 inversion.
        let sf = 1.0;
        let l = 1.0;
        let q = 0.5;
        let m = se_model(sf, l, q);
        let xs = [0.0, 1.0];
        let ys = [0.8, -0.2];
        let c = m
            .condition(vec![v(&[xs[0]]), v(&[xs[1]])], vec![v(&[ys[0]]), v(&[ys[1]])])
            .unwrap();

        let kf = |a: f64, b: f64| sf * sf * (-(a - b) * (a - b) / (2.0 * l * l)).exp();
        let query = 0.3;
        let k11 = kf(xs[0], xs[0]) + q;
        let k12 = kf(xs[0], xs[1]);
        let k22 = kf(xs[1], xs[1]) + q;
        let det = k11 * k22 - k12 * k12;
        let inv = [[k22 / det, -k12 / det], [-k12 / det, k11 / det]];
        let kq = [kf(query, xs[0]), kf(query, xs[1])];
        let r = [ys[0] - 0.95 * xs[0], ys[1] - 0.95 * xs[1]];
        let alpha = [
            inv[0][0] * r[0] + inv[0][1] * r[1],
            inv[1][0] * r[0] + inv[1][1] * r[1],
        ];
        let expect_mean = 0.95 * query + kq[0] * alpha[0] + kq[1] * alpha[1];
        let w = [
            inv[0][0] * kq[0] + inv[0][1] * kq[1],
            inv[1][0] * kq[0] + inv[1][1] * kq[1],
        ];
        let expect_var = kf(query, query) - (kq[0] * w[0] + kq[1] * w[1]);

        let xq = v(&[query]);
        assert_relative_eq!(c.posterior_mean(&xq).unwrap()[0], expect_mean, epsilon = 1e-10);
        assert_relative_eq!(
            c.posterior_kernel(&xq, &xq).unwrap()[(0, 0)],
            expect_var,
            epsilon = 1e-10
        );
    }

    #[test]
    fn joint_step_distribution_single_point() {
        let m = se_model(1.0, 1.0, 0.4);
        let x0 = v(&[0.7]);
        let d = m.joint_step_distribution(std::slice::from_ref(&x0)).unwrap();
        assert_relative_eq!(d.mean()[0], 0.95 * 0.7, epsilon = 1e-15);
        assert_relative_eq!(d.cov().entries()[(0, 0)], 1.0 + 0.4, epsilon = 1e-12);
    }

    #[test]
    fn joint_step_distribution_constant_limit() {
        let m = se_model(1.0, 1e6, 0.25);
        let pts = [v(&[0.3]), v(&[0.3])];
        let d = m.joint_step_distribution(&pts).unwrap();
        let c = d.cov().entries();
        assert_relative_eq!(c[(0, 0)], 1.25, epsilon = 1e-9);
        assert_relative_eq!(c[(0, 1)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(c[(1, 1)], 1.25, epsilon = 1e-9);
    }

    #[test]
    fn joint_step_distribution_assembles_gram_blocks() {
        let m = se_model(0.9, 3.0, 0.1);
        let pts = [v(&[0.0]), v(&[1.0]), v(&[-0.5])];
        let d = m.joint_step_distribution(&pts).unwrap();
        let gram = m.kernel().gram_self(&pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = gram[(i, j)] + if i == j { 0.1 } else { 0.0 };
                assert_relative_eq!(d.cov().entries()[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conditioning_oracle_randomized() {
        // Posterior mean/kernel equal brute-force joint conditioning for
        // several random instances (vector-valued, 2 outputs).
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let m = GpModel::new(
                MeanFn::zero(2),
                MatrixKernel::independent(vec![
                    ScalarKernel::squared_exponential(1.0, 1.0).unwrap(),
                    ScalarKernel::squared_exponential(0.7, 2.0).unwrap(),
                ])
                .unwrap(),
                SymMatrix::symmetrized(DMatrix::identity(2, 2) * 0.2),
            )
            .unwrap();
            let p = 1 + (trial % 4);
            let train_x: Vec<DVector<f64>> =
                (0..p).map(|_| crate::rng::standard_normals(&mut rng, 2)).collect();
            let train_y: Vec<DVector<f64>> =
                (0..p).map(|_| crate::rng::standard_normals(&mut rng, 2)).collect();
            let query = crate::rng::standard_normals(&mut rng, 2);

            let c = m.condition(train_x.clone(), train_y.clone()).unwrap();
            let pm = c.posterior_mean(&query).unwrap();
            let pk = c.posterior_kernel(&query, &query).unwrap();

            let mut pts = train_x.clone();
            pts.push(query.clone());
            let gram = m.kernel().gram_self(&pts).unwrap();
            let joint = GaussianDist::new(
                DVector::zeros(2 * (p + 1)),
                SymMatrix::symmetrized(gram),
            )
            .unwrap();
            let idx: Vec<usize> = (0..2 * p).collect();
            let mut obs = DVector::zeros(2 * p);
            for (i, y) in train_y.iter().enumerate() {
                obs.rows_mut(2 * i, 2).copy_from(y);
            }
            let mut noise = DMatrix::zeros(2 * p, 2 * p);
            for i in 0..p {
                noise
                    .view_mut((2 * i, 2 * i), (2, 2))
                    .copy_from(&(DMatrix::identity(2, 2) * 0.2));
            }
            let post =
                gaussian_condition(&joint, &idx, &obs, &SymMatrix::symmetrized(noise)).unwrap();
            assert_relative_eq!(pm, post.mean().clone(), epsilon = 1e-8);
            assert_relative_eq!(pk, post.cov().entries().clone(), epsilon = 1e-8);
        }
    }
}
