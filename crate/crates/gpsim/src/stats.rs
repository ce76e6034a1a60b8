//! Empirical moments of trajectory batches.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::sampler::TrajectoryBatch;

/// Sample mean/covariance at one step, with standard errors.
#[derive(Debug, Clone)]
pub struct StepMoments {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance.
    pub covariance: SymMatrix,
    /// Standard error of each mean component: `sd / sqrt(N_s)`.
    pub mean_se: DVector<f64>,
    /// Standard error of each variance component, from the fourth-moment
    /// formula `Var(s^2) = (m4 - s^4 (N-3)/(N-1)) / N`.
    pub var_se: DVector<f64>,
}

/// Per-step empirical moments of a batch, including step 0.
#[derive(Debug, Clone)]
pub struct EmpiricalMoments {
    pub per_step: Vec<StepMoments>,
    pub sample_count: usize,
}

/// Computes per-step sample moments over the batch.
pub fn empirical_moments(batch: &TrajectoryBatch) -> Result<EmpiricalMoments> {
    let n_s = batch.sample_count();
    if n_s < 2 {
        return Err(Error::InsufficientSamples {
            required: 2,
            got: n_s,
        });
    }
    let n = batch.state_dim();
    let nf = n_s as f64;
    let mut per_step = Vec::with_capacity(batch.steps() + 1);
    for k in 0..=batch.steps() {
        let mut mean = DVector::zeros(n);
        for i in 0..n_s {
            mean += batch.state(i, k);
        }
        mean /= nf;

        let mut outer = DMatrix::zeros(n, n);
        let mut fourth: DVector<f64> = DVector::zeros(n);
        for i in 0..n_s {
            let d = batch.state(i, k) - &mean;
            outer += &d * d.transpose();
            for c in 0..n {
                fourth[c] += d[c].powi(4);
            }
        }
        let covariance = SymMatrix::symmetrized(outer / (nf - 1.0));
        let mean_se = DVector::from_fn(n, |c, _| (covariance.entries()[(c, c)] / nf).sqrt());
        let var_se = DVector::from_fn(n, |c, _| {
            let s2 = covariance.entries()[(c, c)];
            let m4 = fourth[c] / nf;
            let v: f64 = (m4 - s2 * s2 * (nf - 3.0) / (nf - 1.0)) / nf;
            v.max(0.0).sqrt()
        });
        per_step.push(StepMoments {
            mean,
            covariance,
            mean_se,
            var_se,
        });
    }
    Ok(EmpiricalMoments {
        per_step,
        sample_count: n_s,
    })
}
