//! Independent oracles for the test suites.
//!
//! Everything here deliberately avoids the production inference paths: the
//! smoother oracle conditions a dense joint Gaussian, and the basis-pursuit
//! oracle is a refined grid search. Production code must not call into this
//! module.

use nalgebra::{DMatrix, DVector};

use crate::state::TimeVaryingLDS;

/// Exact posterior of a time-varying linear Gaussian model computed by
/// conditioning the dense joint prior over all `T * N` state variables on the
/// stacked observations. Returns the stacked posterior mean, the full
/// posterior covariance, and the log marginal likelihood of the observations.
pub fn dense_smoother_oracle(lds: &TimeVaryingLDS, obs: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, f64) {
    let t_len = obs.nrows();
    let n = lds.obs_matrix.ncols();
    let m = lds.obs_matrix.nrows();
    let q = DMatrix::from_diagonal(&lds.state_noise_var);

    // Joint prior mean by propagating the initial mean.
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    means.push(lds.init_state_mean.clone());
    for t in 1..t_len {
        let prev = means[t - 1].clone();
        means.push(&lds.transitions[t - 1] * prev + &lds.controls[t - 1]);
    }

    // Joint prior covariance blocks: C[t][t] by the Lyapunov recursion and
    // C[s][t+1] = C[s][t] A_t^T for s <= t.
    let mut cov_blocks = vec![vec![DMatrix::<f64>::zeros(n, n); t_len]; t_len];
    cov_blocks[0][0] = DMatrix::from_diagonal(&lds.init_state_var);
    for t in 1..t_len {
        let a = &lds.transitions[t - 1];
        let own = a * &cov_blocks[t - 1][t - 1] * a.transpose() + &q;
        cov_blocks[t][t] = own;
        for s in 0..t {
            let prev = cov_blocks[s][t - 1].clone();
            cov_blocks[s][t] = prev * a.transpose();
            cov_blocks[t][s] = cov_blocks[s][t].transpose();
        }
    }

    let mut prior_mean = DVector::<f64>::zeros(t_len * n);
    let mut prior_cov = DMatrix::<f64>::zeros(t_len * n, t_len * n);
    for t in 0..t_len {
        prior_mean.rows_mut(t * n, n).copy_from(&means[t]);
        for s in 0..t_len {
            prior_cov.view_mut((t * n, s * n), (n, n)).copy_from(&cov_blocks[t][s]);
        }
    }

    // Stacked observation model y = H x + offset + noise.
    let mut h = DMatrix::<f64>::zeros(t_len * m, t_len * n);
    let mut r = DMatrix::<f64>::zeros(t_len * m, t_len * m);
    let mut y = DVector::<f64>::zeros(t_len * m);
    let mut offset = DVector::<f64>::zeros(t_len * m);
    for t in 0..t_len {
        h.view_mut((t * m, t * n), (m, n)).copy_from(&lds.obs_matrix);
        for i in 0..m {
            r[(t * m + i, t * m + i)] = lds.obs_noise_var[i];
        }
        y.rows_mut(t * m, m).copy_from(&obs.row(t).transpose());
        offset.rows_mut(t * m, m).copy_from(&lds.effective_obs_offset.row(t).transpose());
    }

    let s = &h * &prior_cov * h.transpose() + &r;
    let s_inv = s.clone().try_inverse().expect("oracle innovation invertible");
    let gain = &prior_cov * h.transpose() * &s_inv;
    let innovation = &y - &h * &prior_mean - &offset;
    let post_mean = &prior_mean + &gain * &innovation;
    let post_cov = &prior_cov - &gain * &h * &prior_cov;

    let log_det = s.clone().cholesky().expect("oracle chol").l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
    let quad = innovation.dot(&(&s_inv * &innovation));
    let log_marginal = -0.5 * ((t_len * m) as f64 * crate::linalg::LN_2PI + log_det + quad);

    (post_mean, post_cov, log_marginal)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Minimizes `f` over a box by exhaustive search refined around the incumbent
/// until the grid resolution reaches `target_resolution`. Intended for convex
/// objectives in up to a few variables.
pub fn refined_grid_search<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    lo: &[f64],
    hi: &[f64],
    target_resolution: f64,
) -> (Vec<f64>, f64) {
    let dims = lo.len();
    let mut center: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut span: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).collect();
    let mut best = center.clone();
    let mut best_val = f(&center);
    let steps_per_dim = 20usize;
    loop {
        let step: Vec<f64> = span.iter().map(|s| 2.0 * s / steps_per_dim as f64).collect();
        let mut idx = vec![0usize; dims];
        let mut point = vec![0.0; dims];
        'grid: loop {
            for d in 0..dims {
                point[d] = center[d] - span[d] + idx[d] as f64 * step[d];
            }
            let v = f(&point);
            if v < best_val {
                best_val = v;
                best = point.clone();
            }
            // Odometer increment over the grid.
            for d in 0..dims {
                idx[d] += 1;
                if idx[d] <= steps_per_dim {
                    continue 'grid;
                }
                idx[d] = 0;
            }
            break;
        }
        if step.iter().all(|s| *s <= target_resolution) {
            return (best, best_val);
        }
        center = best.clone();
        span = step.iter().map(|s| 2.0 * s).collect();
    }
}
