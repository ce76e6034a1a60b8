//! Dense Gaussian linear algebra: Cholesky factorization with incremental
//! block extension, multivariate normal sampling and Gaussian conditioning.
//!
//! All covariance-like matrices flow through [`cholesky`], which escalates a
//! relative diagonal jitter ladder when a plain factorization fails. The
//! jitter actually used is recorded in the returned [`CholFactor`] so callers
//! can scale tolerances accordingly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative symmetry tolerance enforced by [`SymMatrix::new`].
const SYMMETRY_RTOL: f64 = 1e-12;

/// Dense symmetric real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    entries: DMatrix<f64>,
}

impl SymMatrix {
    /// Wraps `entries`, rejecting non-square or asymmetric input.
    ///
    /// Asymmetry is measured relative to the largest absolute entry.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch {
                context: "SymMatrix::new (square)",
                expected: entries.nrows(),
                got: entries.ncols(),
            });
        }
        let scale = entries.amax().max(1e-300);
        for i in 0..entries.nrows() {
            for j in 0..i {
                if (entries[(i, j)] - entries[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not symmetric at ({i},{j}): {} vs {}",
                        entries[(i, j)],
                        entries[(j, i)]
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    /// Forces exact symmetry by averaging `m` with its transpose.
    pub fn symmetrized(m: DMatrix<f64>) -> Self {
        let sym = (&m + m.transpose()) * 0.5;
        Self { entries: sym }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            entries: DMatrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            entries: DMatrix::identity(dim, dim),
        }
    }

    /// Scalar 1x1 covariance.
    pub fn scalar(value: f64) -> Self {
        Self {
            entries: DMatrix::from_element(1, 1, value),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// True when every entry is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&v| v == 0.0)
    }
}

/// Escalating relative diagonal jitter, applied when a plain Cholesky fails.
///
/// Rungs are multiples of `trace/dim`, so the ladder is scale-free. When the
/// trace is not positive (e.g. the zero matrix) the ladder falls back to the
/// absolute scale `zero_scale`; a policy without fallback rejects such
/// matrices outright.
#[derive(Debug, Clone, Copy)]
pub struct JitterPolicy {
    first_rung: f64,
    last_rung: f64,
    growth: f64,
    zero_scale: Option<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            first_rung: 1e-12,
            last_rung: 1e-6,
            growth: 10.0,
            zero_scale: Some(1.0),
        }
    }
}

impl JitterPolicy {
    /// Ladder without the absolute fallback: degenerate (zero-trace) matrices
    /// fail instead of being floored.
    pub fn strict() -> Self {
        Self {
            zero_scale: None,
            ..Self::default()
        }
    }

    /// Absolute jitter values to try, in order. The first entry is always 0.
    fn rungs(&self, trace: f64, dim: usize) -> Vec<f64> {
        let mut scale = trace / dim.max(1) as f64;
        if !(scale > 0.0) {
            match self.zero_scale {
                Some(s) => scale = s,
                None => return vec![0.0],
            }
        }
        let mut out = vec![0.0];
        let mut r = self.first_rung;
        while r <= self.last_rung * (1.0 + 1e-9) {
            out.push(r * scale);
            r *= self.growth;
        }
        out
    }
}

/// Lower-triangular Cholesky factor together with the diagonal jitter that
/// was added to obtain it.
#[derive(Debug, Clone)]
pub struct CholFactor {
    lower: DMatrix<f64>,
    jitter_used: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Solves `L x = rhs` by forward substitution.
    pub fn solve_lower(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .solve_lower_triangular(rhs)
            .expect("factor has strictly positive diagonal")
    }

    /// Solves `L L^T x = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let y = self
            .lower
            .solve_lower_triangular(rhs)
            .expect("factor has strictly positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("factor has strictly positive diagonal")
    }
}

/// Plain lower Cholesky of `m + jitter*I`; `None` when a pivot is not
/// strictly positive.
fn try_factor(m: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[(i, j)];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

fn factor_with_ladder(m: &DMatrix<f64>, policy: &JitterPolicy) -> Result<(DMatrix<f64>, f64)> {
    let rungs = policy.rungs(m.trace(), m.nrows());
    for &jitter in &rungs {
        if let Some(l) = try_factor(m, jitter) {
            return Ok((l, jitter));
        }
    }
    Err(Error::NotPositiveDefinite {
        dim: m.nrows(),
        max_jitter: *rungs.last().unwrap_or(&0.0),
    })
}

/// Lower Cholesky factorization with the jitter ladder of `policy`.
pub fn cholesky(m: &SymMatrix, policy: JitterPolicy) -> Result<CholFactor> {
    let (lower, jitter_used) = factor_with_ladder(m.entries(), &policy)?;
    Ok(CholFactor { lower, jitter_used })
}

/// Fills rows `[filled, filled + b)` of `lower`, assuming the leading
/// `filled x filled` block already holds a valid factor. `cross` is the
/// `filled x b` covariance between old and new variables, `corner` the
/// `b x b` covariance of the new block. Returns the jitter applied to the
/// Schur complement.
fn extend_rows(
    lower: &mut DMatrix<f64>,
    filled: usize,
    cross: &DMatrix<f64>,
    corner: &SymMatrix,
    policy: &JitterPolicy,
) -> Result<f64> {
    let b = corner.dim();
    if cross.nrows() != filled || cross.ncols() != b {
        return Err(Error::DimensionMismatch {
            context: "cholesky_extend (cross block)",
            expected: filled,
            got: cross.nrows(),
        });
    }
    // New off-diagonal rows: L21 = (L^-1 cross)^T, by forward substitution.
    for c in 0..b {
        for i in 0..filled {
            let mut s = cross[(i, c)];
            for k in 0..i {
                s -= lower[(i, k)] * lower[(filled + c, k)];
            }
            lower[(filled + c, i)] = s / lower[(i, i)];
        }
    }
    // Schur complement S = corner - L21 L21^T.
    let mut schur = corner.entries().clone();
    for r in 0..b {
        for c in 0..=r {
            let mut s = schur[(r, c)];
            for k in 0..filled {
                s -= lower[(filled + r, k)] * lower[(filled + c, k)];
            }
            schur[(r, c)] = s;
            schur[(c, r)] = s;
        }
    }
    let (l22, jitter) = factor_with_ladder(&schur, policy)?;
    for r in 0..b {
        for c in 0..=r {
            lower[(filled + r, filled + c)] = l22[(r, c)];
        }
    }
    Ok(jitter)
}

/// Extends `factor` to the factor of `[[old, cross], [cross^T, corner]]`.
///
/// The existing rows are copied bit-for-bit; only the new block row is
/// computed, at cost `O(old_dim^2 * new_block)`.
pub fn cholesky_extend(
    factor: &CholFactor,
    cross: &DMatrix<f64>,
    corner: &SymMatrix,
    policy: JitterPolicy,
) -> Result<CholFactor> {
    let d = factor.dim();
    let b = corner.dim();
    let mut lower = DMatrix::zeros(d + b, d + b);
    lower.view_mut((0, 0), (d, d)).copy_from(factor.lower());
    let jitter = extend_rows(&mut lower, d, cross, corner, &policy)?;
    Ok(CholFactor {
        lower,
        jitter_used: factor.jitter_used.max(jitter),
    })
}

/// Cholesky factor grown one block row at a time over a preallocated buffer.
///
/// This is the per-trajectory state of the ground-truth sampler: at step `k`
/// only the new block row of the step-`k` covariance is computed, so the
/// total work over a horizon equals one full factorization.
#[derive(Debug, Clone)]
pub struct IncrementalCholesky {
    lower: DMatrix<f64>,
    dim: usize,
    jitter_used: f64,
    policy: JitterPolicy,
}

impl IncrementalCholesky {
    pub fn with_capacity(capacity: usize, policy: JitterPolicy) -> Self {
        Self {
            lower: DMatrix::zeros(capacity, capacity),
            dim: 0,
            jitter_used: 0.0,
            policy,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Appends one block row/column. `cross` must be `dim x b`.
    pub fn extend(&mut self, cross: &DMatrix<f64>, corner: &SymMatrix) -> Result<()> {
        let b = corner.dim();
        if self.dim + b > self.lower.nrows() {
            // Grow the buffer; old entries are copied verbatim.
            let new_cap = (self.lower.nrows().max(1) * 2).max(self.dim + b);
            let mut bigger = DMatrix::zeros(new_cap, new_cap);
            bigger
                .view_mut((0, 0), (self.dim, self.dim))
                .copy_from(&self.lower.view((0, 0), (self.dim, self.dim)));
            self.lower = bigger;
        }
        let jitter = extend_rows(&mut self.lower, self.dim, cross, corner, &self.policy)?;
        self.dim += b;
        self.jitter_used = self.jitter_used.max(jitter);
        Ok(())
    }

    /// `L[rows, 0..dim] * w` for the `rows` trailing rows of the factor.
    pub fn apply_last_rows(&self, rows: usize, w: &[f64]) -> DVector<f64> {
        assert!(rows <= self.dim && w.len() == self.dim);
        let start = self.dim - rows;
        let mut out = DVector::zeros(rows);
        for r in 0..rows {
            let mut s = 0.0;
            for c in 0..self.dim {
                s += self.lower[(start + r, c)] * w[c];
            }
            out[r] = s;
        }
        out
    }

    /// Copies the current factor out of the buffer.
    pub fn factor(&self) -> CholFactor {
        CholFactor {
            lower: self.lower.view((0, 0), (self.dim, self.dim)).into_owned(),
            jitter_used: self.jitter_used,
        }
    }
}

/// Gaussian distribution given by mean vector and covariance.
#[derive(Debug, Clone)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: SymMatrix,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                context: "GaussianDist::new",
                expected: cov.dim(),
                got: mean.len(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: SymMatrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }
}

/// `mean + L * std_normals` with `L` the (jittered) Cholesky factor of the
/// covariance. Deterministic given the draws.
pub fn mvn_sample(d: &GaussianDist, std_normals: &DVector<f64>) -> Result<DVector<f64>> {
    if std_normals.len() != d.dim() {
        return Err(Error::DimensionMismatch {
            context: "mvn_sample",
            expected: d.dim(),
            got: std_normals.len(),
        });
    }
    let factor = cholesky(d.cov(), JitterPolicy::default())?;
    Ok(d.mean() + factor.lower() * std_normals)
}

/// Conditions `joint` on observing `observed_val` (with additive noise
/// `obs_noise`) at the indices `observed_idx`; returns the posterior over the
/// remaining indices in their original order. Observing nothing returns the
/// joint unchanged.
pub fn gaussian_condition(
    joint: &GaussianDist,
    observed_idx: &[usize],
    observed_val: &DVector<f64>,
    obs_noise: &SymMatrix,
) -> Result<GaussianDist> {
    let dim = joint.dim();
    if observed_idx.is_empty() {
        return Ok(joint.clone());
    }
    if observed_val.len() != observed_idx.len() {
        return Err(Error::DimensionMismatch {
            context: "gaussian_condition (values)",
            expected: observed_idx.len(),
            got: observed_val.len(),
        });
    }
    if obs_noise.dim() != observed_idx.len() {
        return Err(Error::DimensionMismatch {
            context: "gaussian_condition (noise)",
            expected: observed_idx.len(),
            got: obs_noise.dim(),
        });
    }
    let mut seen = vec![false; dim];
    for &i in observed_idx {
        if i >= dim {
            return Err(Error::InvalidArgument(format!(
                "observed index {i} out of range for dim {dim}"
            )));
        }
        if seen[i] {
            return Err(Error::InvalidArgument(format!("duplicate observed index {i}")));
        }
        seen[i] = true;
    }
    let unobserved: Vec<usize> = (0..dim).filter(|i| !seen[*i]).collect();
    let o = observed_idx.len();
    let u = unobserved.len();
    let cov = joint.cov().entries();

    let mut cov_oo = obs_noise.entries().clone();
    for (r, &ir) in observed_idx.iter().enumerate() {
        for (c, &ic) in observed_idx.iter().enumerate() {
            cov_oo[(r, c)] += cov[(ir, ic)];
        }
    }
    let cov_ou = DMatrix::from_fn(o, u, |r, c| cov[(observed_idx[r], unobserved[c])]);
    let mean_o = DVector::from_fn(o, |r, _| joint.mean()[observed_idx[r]]);
    let mean_u = DVector::from_fn(u, |r, _| joint.mean()[unobserved[r]]);

    let factor = cholesky(&SymMatrix::symmetrized(cov_oo), JitterPolicy::strict())?;
    let resid = observed_val - mean_o;
    let weights = factor.solve(&resid);
    let post_mean = mean_u + cov_ou.transpose() * weights;

    // cov_uu - cov_uo (cov_oo + R)^-1 cov_ou, via V = L^-1 cov_ou.
    let v = factor.solve_lower(&cov_ou);
    let mut post_cov = DMatrix::from_fn(u, u, |r, c| cov[(unobserved[r], unobserved[c])]);
    post_cov -= v.transpose() * &v;
    GaussianDist::new(post_mean, SymMatrix::symmetrized(post_cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn random_spd(dim: usize, seed: u64) -> SymMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(dim, dim, |_, _| crate::rng::standard_normals(&mut rng, 1)[0]);
        SymMatrix::symmetrized(&a * a.transpose() + DMatrix::identity(dim, dim) * 0.5)
    }

    #[test]
    fn identity_factors_to_identity() {
        let f = cholesky(&SymMatrix::identity(3), JitterPolicy::default()).unwrap();
        assert_eq!(f.lower(), &DMatrix::identity(3, 3));
        assert_eq!(f.jitter_used(), 0.0);
    }

    #[test]
    fn hand_checked_two_by_two() {
        let m = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0])).unwrap();
        let f = cholesky(&m, JitterPolicy::default()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]);
        assert_relative_eq!(f.lower(), &expected, epsilon = 1e-15);
    }

    #[test]
    fn zero_matrix_strict_fails_default_floors() {
        let z = SymMatrix::zeros(2);
        assert!(matches!(
            cholesky(&z, JitterPolicy::strict()),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let f = cholesky(&z, JitterPolicy::default()).unwrap();
        assert!(f.jitter_used() > 0.0);
    }

    #[test]
    fn asymmetric_input_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(SymMatrix::new(m).is_err());
    }

    #[test]
    fn non_square_rejected() {
        let m = DMatrix::zeros(2, 3);
        assert!(matches!(
            SymMatrix::new(m),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn extend_identity_with_identity_block() {
        let f = cholesky(&SymMatrix::identity(2), JitterPolicy::default()).unwrap();
        let cross = DMatrix::zeros(2, 1);
        let g = cholesky_extend(&f, &cross, &SymMatrix::identity(1), JitterPolicy::default()).unwrap();
        assert_eq!(g.lower(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn extend_matches_full_factorization() {
        let m = random_spd(6, 42);
        let top = SymMatrix::new(m.entries().view((0, 0), (4, 4)).into_owned()).unwrap();
        let cross = m.entries().view((0, 4), (4, 2)).into_owned();
        let corner = SymMatrix::new(m.entries().view((4, 4), (2, 2)).into_owned()).unwrap();
        let f_top = cholesky(&top, JitterPolicy::default()).unwrap();
        let ext = cholesky_extend(&f_top, &cross, &corner, JitterPolicy::default()).unwrap();
        let full = cholesky(&m, JitterPolicy::default()).unwrap();
        assert_relative_eq!(ext.lower(), full.lower(), epsilon = 1e-12);
        // Old rows are reused bit-for-bit.
        assert_eq!(
            ext.lower().view((0, 0), (4, 4)),
            f_top.lower().view((0, 0), (4, 4))
        );
    }

    #[test]
    fn extend_into_singular_corner_uses_ladder_or_fails() {
        // Corner equal to cross^T old^-1 cross makes the Schur complement zero.
        let f = cholesky(&SymMatrix::identity(2), JitterPolicy::default()).unwrap();
        let cross = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let corner = SymMatrix::scalar(1.0); // Schur complement = 0
        assert!(matches!(
            cholesky_extend(&f, &cross, &corner, JitterPolicy::strict()),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let g = cholesky_extend(&f, &cross, &corner, JitterPolicy::default()).unwrap();
        assert!(g.jitter_used() > 0.0);
    }

    #[test]
    fn mvn_sample_standard_passthrough() {
        let d = GaussianDist::standard(3);
        let z = DVector::from_row_slice(&[0.3, -1.2, 2.0]);
        assert_eq!(mvn_sample(&d, &z).unwrap(), z);
    }

    #[test]
    fn mvn_sample_scalar_hand_value() {
        let d = GaussianDist::new(DVector::zeros(1), SymMatrix::scalar(4.0)).unwrap();
        let z = DVector::from_row_slice(&[1.5]);
        assert_relative_eq!(mvn_sample(&d, &z).unwrap()[0], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn mvn_sample_degenerate_cov_stays_near_mean() {
        let mean = DVector::from_row_slice(&[2.0, -1.0]);
        let d = GaussianDist::new(mean.clone(), SymMatrix::zeros(2)).unwrap();
        let z = DVector::from_row_slice(&[1.0, 1.0]);
        let x = mvn_sample(&d, &z).unwrap();
        // Deviation is bounded by sqrt(jitter) per component.
        assert_relative_eq!(x, mean, epsilon = 1e-2);
    }

    #[test]
    fn mvn_sample_length_mismatch() {
        let d = GaussianDist::standard(2);
        let z = DVector::zeros(3);
        assert!(mvn_sample(&d, &z).is_err());
    }

    #[test]
    fn conditioning_on_nothing_is_identity() {
        let joint = GaussianDist::new(
            DVector::from_row_slice(&[1.0, 2.0]),
            random_spd(2, 1),
        )
        .unwrap();
        let post = gaussian_condition(&joint, &[], &DVector::zeros(0), &SymMatrix::zeros(0)).unwrap();
        assert_eq!(post.mean(), joint.mean());
        assert_eq!(post.cov().entries(), joint.cov().entries());
    }

    #[test]
    fn conditioning_independent_components_is_noop() {
        let joint = GaussianDist::new(DVector::zeros(2), SymMatrix::identity(2)).unwrap();
        let post = gaussian_condition(
            &joint,
            &[0],
            &DVector::from_row_slice(&[5.0]),
            &SymMatrix::zeros(1),
        )
        .unwrap();
        assert_eq!(post.dim(), 1);
        assert_relative_eq!(post.mean()[0], 0.0);
        assert_relative_eq!(post.cov().entries()[(0, 0)], 1.0);
    }

    #[test]
    fn conditioning_hand_checked_bivariate() {
        let joint = GaussianDist::new(
            DVector::zeros(2),
            SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap(),
        )
        .unwrap();
        let post = gaussian_condition(
            &joint,
            &[0],
            &DVector::from_row_slice(&[1.0]),
            &SymMatrix::zeros(1),
        )
        .unwrap();
        assert_relative_eq!(post.mean()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(post.cov().entries()[(0, 0)], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn empirical_covariance_of_samples_matches() {
        // 1e5 draws, dim 4: empirical covariance within 5% relative Frobenius.
        let cov = random_spd(4, 9);
        let mean = DVector::from_row_slice(&[1.0, -2.0, 0.5, 3.0]);
        let d = GaussianDist::new(mean.clone(), cov.clone()).unwrap();
        let n = 100_000;
        let mut sum = DVector::zeros(4);
        let mut outer = DMatrix::zeros(4, 4);
        for i in 0..n {
            let z = crate::rng::standard_normals(&mut crate::rng::substream(3, i as u64, 0), 4);
            let x = mvn_sample(&d, &z).unwrap();
            sum += &x;
            outer += &x * x.transpose();
        }
        let nf = n as f64;
        let emp_mean = sum / nf;
        let emp_cov = outer / nf - &emp_mean * emp_mean.transpose();
        let err = (emp_cov - cov.entries()).norm() / cov.entries().norm();
        assert!(err < 0.05, "relative Frobenius error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn factor_reconstructs_spd(dim in 1usize..8, seed in 0u64..1000) {
            let m = random_spd(dim, seed);
            let f = cholesky(&m, JitterPolicy::default()).unwrap();
            let rec = f.lower() * f.lower().transpose();
            let err = (&rec - m.entries()).norm() / m.entries().norm();
            prop_assert!(err < 1e-10, "relative error {}", err);
        }

        #[test]
        fn repeated_extension_matches_one_shot(dim in 2usize..12, seed in 0u64..1000) {
            let m = random_spd(dim, seed.wrapping_add(977));
            let mut inc = IncrementalCholesky::with_capacity(dim, JitterPolicy::default());
            for k in 0..dim {
                let cross = m.entries().view((0, k), (k, 1)).into_owned();
                let corner = SymMatrix::scalar(m.entries()[(k, k)]);
                inc.extend(&cross, &corner).unwrap();
            }
            let full = cholesky(&m, JitterPolicy::default()).unwrap();
            let diff = (inc.factor().lower() - full.lower()).amax();
            prop_assert!(diff < 1e-10, "max entry diff {}", diff);
        }

        #[test]
        fn sequential_conditioning_matches_joint(seed in 0u64..500) {
            let cov = random_spd(4, seed.wrapping_add(31));
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mean = crate::rng::standard_normals(&mut rng, 4);
            let vals = crate::rng::standard_normals(&mut rng, 2);
            let joint = GaussianDist::new(mean, cov).unwrap();

            let both = gaussian_condition(&joint, &[0, 1], &vals, &SymMatrix::zeros(2)).unwrap();

            let first = gaussian_condition(
                &joint, &[0], &DVector::from_row_slice(&[vals[0]]), &SymMatrix::zeros(1),
            ).unwrap();
            // After removing index 0, original index 1 is local index 0.
            let second = gaussian_condition(
                &first, &[0], &DVector::from_row_slice(&[vals[1]]), &SymMatrix::zeros(1),
            ).unwrap();

            let dm = (second.mean() - both.mean()).amax();
            let dc = (second.cov().entries() - both.cov().entries()).amax();
            prop_assert!(dm < 1e-10 && dc < 1e-10, "mean diff {}, cov diff {}", dm, dc);
        }
    }
}
