//! Scalar and matrix-valued kernels with stacked-point gram assembly.
//!
//! Matrix-valued kernels over vector states are built from scalar kernels
//! either as independent per-output-dimension GPs (block-diagonal evaluation)
//! or by coupling output dimensions through an appended distance-metric
//! coordinate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Scalar covariance function.
#[derive(Debug, Clone)]
pub enum ScalarKernel {
    /// `s^2 * exp(-|x - y|^2 / (2 l^2))`
    SquaredExponential { signal_std: f64, lengthscale: f64 },
    /// `s^2 * <x, y>`
    Linear { signal_std: f64 },
    /// Entrywise product of two scalar kernels.
    Product(Box<ScalarKernel>, Box<ScalarKernel>),
}

impl ScalarKernel {
    pub fn squared_exponential(signal_std: f64, lengthscale: f64) -> Result<Self> {
        if !(signal_std >= 0.0) || !signal_std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "signal_std must be finite and nonnegative, got {signal_std}"
            )));
        }
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lengthscale must be finite and positive, got {lengthscale}"
            )));
        }
        Ok(Self::SquaredExponential {
            signal_std,
            lengthscale,
        })
    }

    pub fn linear(signal_std: f64) -> Result<Self> {
        if !(signal_std >= 0.0) || !signal_std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "signal_std must be finite and nonnegative, got {signal_std}"
            )));
        }
        Ok(Self::Linear { signal_std })
    }

    pub fn product(left: ScalarKernel, right: ScalarKernel) -> Self {
        Self::Product(Box::new(left), Box::new(right))
    }

    /// Evaluates `k(x, y)`. Callers are responsible for matching lengths.
    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), y.len());
        match self {
            Self::SquaredExponential {
                signal_std,
                lengthscale,
            } => {
                let mut d2 = 0.0;
                for i in 0..x.len() {
                    let d = x[i] - y[i];
                    d2 += d * d;
                }
                signal_std * signal_std * (-d2 / (2.0 * lengthscale * lengthscale)).exp()
            }
            Self::Linear { signal_std } => signal_std * signal_std * x.dot(y),
            Self::Product(l, r) => l.eval(x, y) * r.eval(x, y),
        }
    }
}

#[derive(Debug, Clone)]
enum Coupling {
    /// One scalar kernel per output dimension; off-diagonal output
    /// covariance is zero.
    Independent(Vec<ScalarKernel>),
    /// `[k(x,y)]_{i,j} = base([x; d_i], [y; d_j])` with one metric value per
    /// output dimension.
    DistanceCoupled { base: ScalarKernel, metric: Vec<f64> },
}

/// Matrix-valued kernel `k : R^d x R^d -> R^{n x n}`.
///
/// The input length `d` is not fixed at construction; controlled systems
/// evaluate the same kernel on stacked state/input points.
#[derive(Debug, Clone)]
pub struct MatrixKernel {
    out_dim: usize,
    coupling: Coupling,
}

impl MatrixKernel {
    /// Independent outputs, one scalar kernel per dimension.
    pub fn independent(per_dim: Vec<ScalarKernel>) -> Result<Self> {
        if per_dim.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one output dimension required".into(),
            ));
        }
        Ok(Self {
            out_dim: per_dim.len(),
            coupling: Coupling::Independent(per_dim),
        })
    }

    /// Scalar (1-output) kernel.
    pub fn scalar(kernel: ScalarKernel) -> Self {
        Self {
            out_dim: 1,
            coupling: Coupling::Independent(vec![kernel]),
        }
    }

    /// Output coupling through an appended metric coordinate, one value per
    /// output dimension.
    pub fn distance_coupled(base: ScalarKernel, metric: Vec<f64>) -> Result<Self> {
        if metric.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one output dimension required".into(),
            ));
        }
        Ok(Self {
            out_dim: metric.len(),
            coupling: Coupling::DistanceCoupled { base, metric },
        })
    }

    /// Distance coupling with the default metric `d(i) = i`.
    pub fn distance_coupled_default(base: ScalarKernel, out_dim: usize) -> Result<Self> {
        Self::distance_coupled(base, (0..out_dim).map(|i| i as f64).collect())
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Scalar kernel of the given output dimension, when outputs are
    /// independent.
    pub fn independent_component(&self, dim: usize) -> Option<&ScalarKernel> {
        match &self.coupling {
            Coupling::Independent(ks) => ks.get(dim),
            Coupling::DistanceCoupled { .. } => None,
        }
    }

    /// Evaluates the `n x n` output block `k(x, y)`.
    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                context: "MatrixKernel::eval",
                expected: x.len(),
                got: y.len(),
            });
        }
        let n = self.out_dim;
        match &self.coupling {
            Coupling::Independent(ks) => {
                let mut out = DMatrix::zeros(n, n);
                for (i, k) in ks.iter().enumerate() {
                    out[(i, i)] = k.eval(x, y);
                }
                Ok(out)
            }
            Coupling::DistanceCoupled { base, metric } => {
                let augment = |v: &DVector<f64>, d: f64| {
                    let mut a = DVector::zeros(v.len() + 1);
                    a.rows_mut(0, v.len()).copy_from(v);
                    a[v.len()] = d;
                    a
                };
                let xs: Vec<DVector<f64>> = metric.iter().map(|&d| augment(x, d)).collect();
                let ys: Vec<DVector<f64>> = metric.iter().map(|&d| augment(y, d)).collect();
                Ok(DMatrix::from_fn(n, n, |i, j| base.eval(&xs[i], &ys[j])))
            }
        }
    }

    /// Gram matrix over stacked points: block `(i, j)` is `k(xs[i], ys[j])`,
    /// giving a `(p*n) x (q*n)` matrix.
    pub fn gram(&self, xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let n = self.out_dim;
        let mut out = DMatrix::zeros(xs.len() * n, ys.len() * n);
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                let block = self.eval(x, y)?;
                out.view_mut((i * n, j * n), (n, n)).copy_from(&block);
            }
        }
        Ok(out)
    }

    /// Symmetric gram over one point set; blocks below the diagonal are
    /// mirrored so the result is exactly symmetric.
    pub fn gram_self(&self, xs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let n = self.out_dim;
        let mut out = DMatrix::zeros(xs.len() * n, xs.len() * n);
        for i in 0..xs.len() {
            for j in i..xs.len() {
                let block = self.eval(&xs[i], &xs[j])?;
                out.view_mut((i * n, j * n), (n, n)).copy_from(&block);
                if j != i {
                    out.view_mut((j * n, i * n), (n, n))
                        .copy_from(&block.transpose());
                }
            }
        }
        Ok(out)
    }
}
