//! Mean functions of the transition model, with analytic or finite-difference
//! Jacobians.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type EvalFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Mean function `R^d -> R^n`. For autonomous systems `d = n`; controlled
/// systems evaluate on stacked state/input points (`d = n + input dim`).
#[derive(Clone)]
pub enum MeanFn {
    Zero { out_dim: usize },
    /// `x -> gain * x` with an `n x d` gain matrix.
    LinearMap { gain: DMatrix<f64> },
    /// User-supplied evaluator with optional analytic Jacobian. Evaluators
    /// must be re-entrant: they may be called concurrently from sampling
    /// threads.
    Callback {
        out_dim: usize,
        eval: Arc<EvalFn>,
        jacobian: Option<Arc<JacFn>>,
    },
}

impl fmt::Debug for MeanFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero { out_dim } => write!(f, "MeanFn::Zero({out_dim})"),
            Self::LinearMap { gain } => {
                write!(f, "MeanFn::LinearMap({}x{})", gain.nrows(), gain.ncols())
            }
            Self::Callback { out_dim, jacobian, .. } => write!(
                f,
                "MeanFn::Callback(out_dim={out_dim}, analytic_jacobian={})",
                jacobian.is_some()
            ),
        }
    }
}

impl MeanFn {
    pub fn zero(out_dim: usize) -> Self {
        Self::Zero { out_dim }
    }

    pub fn linear(gain: DMatrix<f64>) -> Self {
        Self::LinearMap { gain }
    }

    /// Scalar gain `x -> g x`.
    pub fn scalar_gain(gain: f64) -> Self {
        Self::LinearMap {
            gain: DMatrix::from_element(1, 1, gain),
        }
    }

    pub fn callback<F>(out_dim: usize, eval: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::Callback {
            out_dim,
            eval: Arc::new(eval),
            jacobian: None,
        }
    }

    pub fn callback_with_jacobian<F, J>(out_dim: usize, eval: F, jacobian: J) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self::Callback {
            out_dim,
            eval: Arc::new(eval),
            jacobian: Some(Arc::new(jacobian)),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Zero { out_dim } => *out_dim,
            Self::LinearMap { gain } => gain.nrows(),
            Self::Callback { out_dim, .. } => *out_dim,
        }
    }

    /// Evaluates the mean at `x`.
    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Self::Zero { out_dim } => Ok(DVector::zeros(*out_dim)),
            Self::LinearMap { gain } => {
                if x.len() != gain.ncols() {
                    return Err(Error::DimensionMismatch {
                        context: "MeanFn::eval (linear map input)",
                        expected: gain.ncols(),
                        got: x.len(),
                    });
                }
                Ok(gain * x)
            }
            Self::Callback { out_dim, eval, .. } => {
                let y = eval(x);
                if y.len() != *out_dim {
                    return Err(Error::DimensionMismatch {
                        context: "MeanFn::eval (callback output)",
                        expected: *out_dim,
                        got: y.len(),
                    });
                }
                Ok(y)
            }
        }
    }

    /// Evaluates the mean at each point and stacks the results.
    pub fn eval_stacked(&self, xs: &[DVector<f64>]) -> Result<DVector<f64>> {
        let n = self.out_dim();
        let mut out = DVector::zeros(xs.len() * n);
        for (i, x) in xs.iter().enumerate() {
            out.rows_mut(i * n, n).copy_from(&self.eval(x)?);
        }
        Ok(out)
    }

    /// Jacobian at `x` (`n x d`). Analytic for `Zero`/`LinearMap` and for
    /// callbacks that provide one; otherwise central finite differences with
    /// per-coordinate step `max(1e-6, 1e-6 |x_i|)`.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            Self::Zero { out_dim } => Ok(DMatrix::zeros(*out_dim, x.len())),
            Self::LinearMap { gain } => {
                if x.len() != gain.ncols() {
                    return Err(Error::DimensionMismatch {
                        context: "MeanFn::jacobian (linear map input)",
                        expected: gain.ncols(),
                        got: x.len(),
                    });
                }
                Ok(gain.clone())
            }
            Self::Callback { out_dim, jacobian, .. } => {
                if let Some(jac) = jacobian {
                    let j = jac(x);
                    if j.nrows() != *out_dim || j.ncols() != x.len() {
                        return Err(Error::DimensionMismatch {
                            context: "MeanFn::jacobian (callback output)",
                            expected: *out_dim,
                            got: j.nrows(),
                        });
                    }
                    Ok(j)
                } else {
                    finite_difference_jacobian(|p| self.eval(p), x, *out_dim)
                }
            }
        }
    }
}

/// Central finite-difference Jacobian with step `max(1e-6, 1e-6 |x_i|)`.
pub fn finite_difference_jacobian<F>(
    f: F,
    x: &DVector<f64>,
    out_dim: usize,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(out_dim, x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = (1e-6_f64).max(1e-6 * x[i].abs());
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        jac.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_mean_and_jacobian() {
        let m = MeanFn::zero(2);
        let x = DVector::from_row_slice(&[1.0, -3.0]);
        assert_eq!(m.eval(&x).unwrap(), DVector::zeros(2));
        assert_eq!(m.jacobian(&x).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn scalar_gain_matches_hand_value() {
        let m = MeanFn::scalar_gain(0.95);
        let x = DVector::from_row_slice(&[2.0]);
        assert_relative_eq!(m.eval(&x).unwrap()[0], 1.9, epsilon = 1e-15);
        assert_relative_eq!(m.jacobian(&x).unwrap()[(0, 0)], 0.95);
    }

    #[test]
    fn callback_sine_at_origin() {
        let m = MeanFn::callback(2, |x| x.map(f64::sin));
        let y = m.eval(&DVector::zeros(2)).unwrap();
        assert_eq!(y, DVector::zeros(2));
    }

    #[test]
    fn finite_difference_square() {
        let m = MeanFn::callback(1, |x| x.map(|v| v * v));
        let j = m.jacobian(&DVector::from_row_slice(&[3.0])).unwrap();
        assert_relative_eq!(j[(0, 0)], 6.0, max_relative = 1e-5);
    }

    #[test]
    fn provided_jacobian_matches_finite_differences() {
        let m = MeanFn::callback_with_jacobian(
            1,
            |x| x.map(|v| v * v * v),
            |x| DMatrix::from_element(1, 1, 3.0 * x[0] * x[0]),
        );
        let x = DVector::from_row_slice(&[1.7]);
        let analytic = m.jacobian(&x).unwrap();
        let fd = finite_difference_jacobian(|p| m.eval(p), &x, 1).unwrap();
        assert_relative_eq!(analytic[(0, 0)], fd[(0, 0)], max_relative = 1e-5);
    }

    #[test]
    fn stacked_evaluation() {
        let m = MeanFn::scalar_gain(2.0);
        let xs = [DVector::from_row_slice(&[1.0]), DVector::from_row_slice(&[3.0])];
        let s = m.eval_stacked(&xs).unwrap();
        assert_eq!(s, DVector::from_row_slice(&[2.0, 6.0]));
    }

    #[test]
    fn linear_dimension_mismatch() {
        let m = MeanFn::scalar_gain(1.0);
        assert!(m.eval(&DVector::zeros(2)).is_err());
    }
}
