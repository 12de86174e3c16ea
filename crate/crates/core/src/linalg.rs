//! Small dense linear-algebra and sampling helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{BefaError, Result};

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| BefaError::Numerical(format!("{what} is not positive definite")))
}

/// Draw x ~ N(A⁻¹ b, A⁻¹) given the precision A and linear term b.
pub fn sample_from_precision<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    linear: &DVector<f64>,
    rng: &mut R,
    what: &str,
) -> Result<DVector<f64>> {
    let chol = cholesky(precision, what)?;
    let mean = chol.solve(linear);
    let z = standard_normal_vec(linear.len(), rng);
    // L' x = z  =>  Cov(x) = (L L')⁻¹
    let l = chol.l();
    let dev = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| BefaError::Numerical(format!("{what}: singular factor")))?;
    Ok(mean + dev)
}

/// Cholesky factor of a fixed precision matrix, reused across many draws.
pub struct PrecisionSampler {
    chol: Cholesky<f64, Dyn>,
    upper: DMatrix<f64>,
}

impl PrecisionSampler {
    pub fn new(precision: &DMatrix<f64>, what: &str) -> Result<Self> {
        let chol = cholesky(precision, what)?;
        let upper = chol.l().transpose();
        Ok(PrecisionSampler { chol, upper })
    }

    /// Draw x ~ N(A⁻¹ b, A⁻¹).
    pub fn draw<R: Rng + ?Sized>(&self, linear: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let mean = self.chol.solve(linear);
        let mut z = standard_normal_vec(linear.len(), rng);
        // L is invertible once the factorisation succeeded
        self.upper.solve_upper_triangular_mut(&mut z);
        mean + z
    }
}

/// Draw from Wishart(df, S) with S = L L', by the Bartlett decomposition.
/// E[W] = df · S.
pub fn sample_wishart<R: Rng + ?Sized>(df: f64, scale_chol: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let p = scale_chol.nrows();
    debug_assert!(df > (p as f64) - 1.0);
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).expect("df > p - 1");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = scale_chol * a;
    &la * la.transpose()
}

/// Conjugate update of a precision matrix with Wishart(df0, I) prior given
/// the scatter Σ x x' of `n` zero-mean draws.
pub fn sample_precision_posterior<R: Rng + ?Sized>(
    df0: f64,
    scatter: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = scatter.nrows();
    let inv_scale = DMatrix::identity(p, p) + scatter;
    let scale = cholesky(&inv_scale, "Wishart inverse scale")?.inverse();
    let scale = symmetrize(&scale);
    let l = cholesky(&scale, "Wishart scale")?.l();
    Ok(symmetrize(&sample_wishart(df0 + n as f64, &l, rng)))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix in non-increasing order.
pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Covariance → correlation.
pub fn cov_to_corr(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = cov.nrows();
    let sd: Vec<f64> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
    if sd.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return None;
    }
    Some(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            cov[(i, j)] / (sd[i] * sd[j])
        }
    }))
}

/// Numerical rank test via singular values (relative tolerance).
pub fn has_full_column_rank(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if m.ncols() == 0 {
        return true;
    }
    if m.nrows() < m.ncols() {
        return false;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    max > 0.0 && min > rel_tol * max
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Random orthogonal matrix (QR of a Gaussian matrix, sign-fixed).
pub fn random_orthogonal<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn precision_draw_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prec = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let lin = DVector::from_vec(vec![1.0, -1.0]);
        let cov = prec.clone().try_inverse().unwrap();
        let mean = &cov * &lin;
        let n = 200_000;
        let mut m = DVector::zeros(2);
        let mut s = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = sample_from_precision(&prec, &lin, &mut rng, "test").unwrap();
            m += &x;
            s += &x * x.transpose();
        }
        m /= n as f64;
        s = s / n as f64 - &m * m.transpose();
        assert!((m - mean).amax() < 0.01);
        assert!(max_abs_diff(&s, &cov) < 0.01);
    }

    #[test]
    fn wishart_mean_is_df_times_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scale = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 2.0, 0.1, 0.0, 0.1, 0.5]);
        let l = cholesky(&scale, "s").unwrap().l();
        let df = 5.0;
        let n = 50_000;
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..n {
            acc += sample_wishart(df, &l, &mut rng);
        }
        acc /= n as f64;
        assert!(max_abs_diff(&acc, &(scale * df)) < 0.05);
    }

    #[test]
    fn correlation_and_eigen_helpers() {
        let c = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 9.0]);
        let r = cov_to_corr(&c).unwrap();
        assert!((r[(0, 1)] - 2.0 / 6.0).abs() < 1e-15);
        let ev = sorted_eigenvalues(&r);
        assert!((ev[0] - (1.0 + 1.0 / 3.0)).abs() < 1e-12);
        assert!(ev[0] >= ev[1]);
        assert!(cov_to_corr(&DMatrix::zeros(2, 2)).is_none());
    }

    #[test]
    fn rank_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_orthogonal(4, &mut rng);
        assert!(max_abs_diff(&(&q * q.transpose()), &DMatrix::identity(4, 4)) < 1e-12);
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(!has_full_column_rank(&m, 1e-10));
        assert!(has_full_column_rank(&q, 1e-10));
    }
}
