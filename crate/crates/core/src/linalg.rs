//! Small dense linear-algebra and density helpers used throughout inference.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{PdldsError, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Replaces `a` with its symmetric part `(a + a^T) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let at = a.transpose();
    *a += at;
    *a *= 0.5;
}

/// Cholesky factorization with escalating diagonal jitter.
///
/// Tries `base_jitter`, then two 100x escalations, before giving up.
pub fn cholesky_jittered(a: &DMatrix<f64>, base_jitter: f64) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let n = a.nrows();
    let mut jitter = base_jitter;
    for _ in 0..3 {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Some(ch);
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 100.0 };
    }
    None
}

/// Solves `a x = b` by jittered Cholesky, for symmetric positive definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, jitter: f64, context: &str) -> Result<DMatrix<f64>> {
    let ch = cholesky_jittered(a, jitter).ok_or_else(|| PdldsError::SingularSystem {
        context: context.to_string(),
    })?;
    Ok(ch.solve(b))
}

/// Log density of a Gaussian with diagonal covariance.
pub fn log_normal_diag(x: &DVector<f64>, mean: &DVector<f64>, var: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let d = x[i] - mean[i];
        acc += -0.5 * (LN_2PI + var[i].ln() + d * d / var[i]);
    }
    acc
}

/// Log density of a scalar Gaussian.
pub fn log_normal_scalar(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Log density of an inverse gamma with shape `alpha` and scale `beta`.
pub fn log_inv_gamma(x: f64, alpha: f64, beta: f64) -> f64 {
    alpha * beta.ln() - statrs::function::gamma::ln_gamma(alpha) - (alpha + 1.0) * x.ln() - beta / x
}

/// Log density of a Gaussian with full covariance given its Cholesky factor.
pub fn log_normal_chol(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let n = x.len() as f64;
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).expect("triangular solve");
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (n * LN_2PI + log_det + z.dot(&z))
}

/// Draws from `N(mean, cov)` given the Cholesky factor of `cov`.
pub fn sample_normal_chol<R: Rng>(
    mean: &DVector<f64>,
    chol: &Cholesky<f64, nalgebra::Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let n = mean.len();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol.l() * z
}

/// Checks that every entry of `v` is strictly positive and finite.
pub fn check_positive(v: &DVector<f64>, context: &str) -> Result<()> {
    for (i, &x) in v.iter().enumerate() {
        if !(x > 0.0 && x.is_finite()) {
            return Err(PdldsError::value(context, format!("entry {i} = {x} must be positive and finite")));
        }
    }
    Ok(())
}

/// Checks that every entry of `m` is finite.
pub fn check_finite(m: &DMatrix<f64>, context: &str) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(PdldsError::value(context, "non-finite entry"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diag_gaussian_matches_scalar_product() {
        let x = DVector::from_vec(vec![0.3, -1.2]);
        let mu = DVector::from_vec(vec![0.0, 0.5]);
        let var = DVector::from_vec(vec![2.0, 0.7]);
        let expect = log_normal_scalar(0.3, 0.0, 2.0) + log_normal_scalar(-1.2, 0.5, 0.7);
        assert!((log_normal_diag(&x, &mu, &var) - expect).abs() < 1e-14);
    }

    #[test]
    fn inv_gamma_normalizes_on_grid() {
        // Riemann check of the IG(2, 1.5) density mass.
        let (a, b) = (2.0, 1.5);
        let mut mass = 0.0;
        let dx = 1e-4;
        let mut x = dx;
        while x < 60.0 {
            mass += log_inv_gamma(x, a, b).exp() * dx;
            x += dx;
        }
        assert!((mass - 1.0).abs() < 1e-3, "mass = {mass}");
    }

    #[test]
    fn full_cov_gaussian_matches_diag_case() {
        let x = DVector::from_vec(vec![0.1, 0.9]);
        let mu = DVector::from_vec(vec![0.0, 1.0]);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.5]));
        let ch = Cholesky::new(cov).unwrap();
        let expect = log_normal_diag(&x, &mu, &DVector::from_vec(vec![0.5, 1.5]));
        assert!((log_normal_chol(&x, &mu, &ch) - expect).abs() < 1e-12);
    }
}
