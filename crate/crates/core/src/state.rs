//! Latent state update: offset estimation by moving average and exact
//! smoothing of the fast component under time-varying composed dynamics.
//!
//! The offset enters only through the effective observation offset
//! `d + D b_t`; all stochasticity lives in the fast latent.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{PdldsError, Result};
use crate::linalg::{cholesky_jittered, sample_normal_chol, symmetrize, LN_2PI};
use crate::model::{compose_transition, ModelParameters, StatePosterior};
use crate::rng::derive_rng;

/// Jitter added to innovation covariances before inversion.
const INNOVATION_JITTER: f64 = 1e-9;

/// A time-varying linear Gaussian state-space model over the fast latent.
#[derive(Debug, Clone)]
pub struct TimeVaryingLDS {
    /// Transition matrices `A_t = I + F_t`, length T - 1.
    pub transitions: Vec<DMatrix<f64>>,
    /// Control inputs on the fast latent, length T - 1. Zero under the
    /// offset-through-observations reading; kept for generality.
    pub controls: Vec<DVector<f64>>,
    /// Effective observation offsets `d + D b_t`, T x M.
    pub effective_obs_offset: DMatrix<f64>,
    /// The offset estimates `b_t` themselves, T x N.
    pub offsets: DMatrix<f64>,
    /// Diagonal of the observation noise covariance.
    pub obs_noise_var: DVector<f64>,
    /// Diagonal of the state noise covariance.
    pub state_noise_var: DVector<f64>,
    /// Observation matrix, M x N.
    pub obs_matrix: DMatrix<f64>,
    /// Initial state mean.
    pub init_state_mean: DVector<f64>,
    /// Diagonal of the initial state covariance.
    pub init_state_var: DVector<f64>,
}

impl TimeVaryingLDS {
    pub fn len(&self) -> usize {
        self.effective_obs_offset.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let t_len = self.len();
        let n = self.obs_matrix.ncols();
        let m = self.obs_matrix.nrows();
        if self.transitions.len() + 1 != t_len || self.controls.len() + 1 != t_len {
            return Err(PdldsError::dims("TimeVaryingLDS", t_len - 1, self.transitions.len()));
        }
        for (t, a) in self.transitions.iter().enumerate() {
            if a.nrows() != n || a.ncols() != n {
                return Err(PdldsError::dims("transition", format!("{n}x{n}"), format!("t={t}: {}x{}", a.nrows(), a.ncols())));
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(PdldsError::value("transition", format!("non-finite A at t={t}")));
            }
        }
        if self.effective_obs_offset.ncols() != m {
            return Err(PdldsError::dims("effective_obs_offset", m, self.effective_obs_offset.ncols()));
        }
        if self.offsets.nrows() != t_len || self.offsets.ncols() != n {
            return Err(PdldsError::dims("offsets", format!("{t_len}x{n}"), format!("{}x{}", self.offsets.nrows(), self.offsets.ncols())));
        }
        Ok(())
    }
}

/// Centered moving average with truncated windows at the edges.
///
/// The window at step t covers `max(1, t - floor(S/2)) ..= min(T, t + floor(S/2))`
/// (1-based). `S >= T` averages the whole trajectory at every step, which
/// turns the offset into a constant and disables its time variation.
pub fn estimate_offsets(state_means: &DMatrix<f64>, window: usize) -> Result<DMatrix<f64>> {
    let t_len = state_means.nrows();
    let n = state_means.ncols();
    if window < 1 || window > t_len {
        return Err(PdldsError::value(
            "estimate_offsets",
            format!("window {window} outside 1..=T={t_len}"),
        ));
    }
    let mut out = DMatrix::<f64>::zeros(t_len, n);
    if window == t_len {
        let mean = state_means.row_sum() / t_len as f64;
        for t in 0..t_len {
            out.row_mut(t).copy_from(&mean);
        }
        return Ok(out);
    }
    let half = window / 2;
    // Prefix sums over rows, one pass per trajectory.
    let mut prefix = DMatrix::<f64>::zeros(t_len + 1, n);
    for t in 0..t_len {
        let acc = prefix.row(t) + state_means.row(t);
        prefix.row_mut(t + 1).copy_from(&acc);
    }
    for t in 0..t_len {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(t_len - 1);
        let count = (hi - lo + 1) as f64;
        let sum = prefix.row(hi + 1) - prefix.row(lo);
        out.row_mut(t).copy_from(&(sum / count));
    }
    for v in out.iter() {
        if !v.is_finite() {
            return Err(PdldsError::value("estimate_offsets", "non-finite output"));
        }
    }
    Ok(out)
}

/// Builds the time-varying model: `A_t = I + F_t` from the coefficient sample
/// and effective observation offsets `d + D b_t`.
pub fn build_tv_lds(
    params: &ModelParameters,
    coef_sample: &DMatrix<f64>,
    offsets: &DMatrix<f64>,
) -> Result<TimeVaryingLDS> {
    let t_len = coef_sample.nrows();
    let n = params.n_latent();
    let k = params.n_operators();
    if coef_sample.ncols() != k {
        return Err(PdldsError::dims("build_tv_lds coefs", k, coef_sample.ncols()));
    }
    if offsets.nrows() != t_len || offsets.ncols() != n {
        return Err(PdldsError::dims("build_tv_lds offsets", format!("{t_len}x{n}"), format!("{}x{}", offsets.nrows(), offsets.ncols())));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut transitions = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len.saturating_sub(1) {
        let f = compose_transition(params, &coef_sample.row(t).transpose())?;
        transitions.push(&eye + f);
    }
    let controls = vec![DVector::<f64>::zeros(n); t_len.saturating_sub(1)];
    let mut effective = DMatrix::<f64>::zeros(t_len, params.n_obs());
    for t in 0..t_len {
        let o = &params.obs_offset + &params.obs_matrix * offsets.row(t).transpose();
        effective.row_mut(t).copy_from(&o.transpose());
    }
    let lds = TimeVaryingLDS {
        transitions,
        controls,
        effective_obs_offset: effective,
        offsets: offsets.clone(),
        obs_noise_var: params.obs_noise_var.clone(),
        state_noise_var: params.state_noise_var.clone(),
        obs_matrix: params.obs_matrix.clone(),
        init_state_mean: params.init_state_mean.clone(),
        init_state_var: params.init_state_var.clone(),
    };
    lds.validate()?;
    Ok(lds)
}

/// Exact Gaussian smoothing: forward Kalman filter with Joseph-form updates,
/// then a backward RTS pass. Returns smoothed marginals, lag-one cross
/// covariances, and the filtered log marginal likelihood.
pub fn kalman_smooth(lds: &TimeVaryingLDS, obs: &DMatrix<f64>) -> Result<StatePosterior> {
    lds.validate()?;
    let t_len = lds.len();
    let n = lds.obs_matrix.ncols();
    let m = lds.obs_matrix.nrows();
    if obs.nrows() != t_len || obs.ncols() != m {
        return Err(PdldsError::dims("kalman_smooth obs", format!("{t_len}x{m}"), format!("{}x{}", obs.nrows(), obs.ncols())));
    }
    let h = &lds.obs_matrix;
    let r = DMatrix::from_diagonal(&lds.obs_noise_var);
    let q = DMatrix::from_diagonal(&lds.state_noise_var);
    let eye = DMatrix::<f64>::identity(n, n);

    let mut filt_means = Vec::with_capacity(t_len);
    let mut filt_covs = Vec::with_capacity(t_len);
    let mut pred_means = Vec::with_capacity(t_len);
    let mut pred_covs = Vec::with_capacity(t_len);
    let mut log_likelihood = 0.0;

    for t in 0..t_len {
        let (m_pred, p_pred) = if t == 0 {
            (lds.init_state_mean.clone(), DMatrix::from_diagonal(&lds.init_state_var))
        } else {
            let a = &lds.transitions[t - 1];
            let m_pred = a * &filt_means[t - 1] + &lds.controls[t - 1];
            let mut p_pred = a * &filt_covs[t - 1] * a.transpose() + &q;
            symmetrize(&mut p_pred);
            (m_pred, p_pred)
        };

        let y = obs.row(t).transpose();
        let offset = lds.effective_obs_offset.row(t).transpose();
        let innovation = &y - h * &m_pred - offset;
        let mut s = h * &p_pred * h.transpose() + &r;
        for i in 0..m {
            s[(i, i)] += INNOVATION_JITTER;
        }
        symmetrize(&mut s);
        let s_chol = cholesky_jittered(&s, 0.0).ok_or(PdldsError::NotPositiveDefinite { t })?;
        // Gain K = P H^T S^-1 via S X = H P.
        let gain = s_chol.solve(&(h * &p_pred)).transpose();
        let m_filt = &m_pred + &gain * &innovation;
        // Joseph form keeps the covariance symmetric positive semidefinite.
        let i_kh = &eye - &gain * h;
        let mut p_filt = &i_kh * &p_pred * i_kh.transpose() + &gain * &r * gain.transpose();
        symmetrize(&mut p_filt);

        let z = s_chol.l().solve_lower_triangular(&innovation).ok_or(PdldsError::NotPositiveDefinite { t })?;
        let log_det = 2.0 * s_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        log_likelihood += -0.5 * (m as f64 * LN_2PI + log_det + z.dot(&z));

        pred_means.push(m_pred);
        pred_covs.push(p_pred);
        filt_means.push(m_filt);
        filt_covs.push(p_filt);
    }

    // Backward RTS pass.
    let mut smooth_means = filt_means.clone();
    let mut smooth_covs = filt_covs.clone();
    let mut pair_cov = vec![DMatrix::<f64>::zeros(n, n); t_len.saturating_sub(1)];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let a = &lds.transitions[t];
        let p_pred_chol = cholesky_jittered(&pred_covs[t + 1], INNOVATION_JITTER)
            .ok_or(PdldsError::NotPositiveDefinite { t: t + 1 })?;
        // J_t = P_t A^T P_pred^{-1} via P_pred X = A P_t.
        let j = p_pred_chol.solve(&(a * &filt_covs[t])).transpose();
        let mean = &filt_means[t] + &j * (&smooth_means[t + 1] - &pred_means[t + 1]);
        let mut cov = &filt_covs[t] + &j * (&smooth_covs[t + 1] - &pred_covs[t + 1]) * j.transpose();
        symmetrize(&mut cov);
        pair_cov[t] = &j * &smooth_covs[t + 1];
        smooth_means[t] = mean;
        smooth_covs[t] = cov;
    }

    let mut smooth_mean = DMatrix::<f64>::zeros(t_len, n);
    for t in 0..t_len {
        smooth_mean.row_mut(t).copy_from(&smooth_means[t].transpose());
    }
    let reconstructed = &smooth_mean + &lds.offsets;
    Ok(StatePosterior {
        smooth_mean,
        smooth_var: smooth_covs,
        pair_cov,
        offsets: lds.offsets.clone(),
        reconstructed_state: reconstructed,
        log_likelihood,
    })
}

/// Empirical mean and covariance of a set of draws.
#[derive(Debug, Clone)]
pub struct MomentPair {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn empirical_moments(draws: &[DVector<f64>]) -> MomentPair {
    let n = draws[0].len();
    let count = draws.len() as f64;
    let mut mean = DVector::<f64>::zeros(n);
    for d in draws {
        mean += d;
    }
    mean /= count;
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for d in draws {
        let c = d - &mean;
        cov += &c * c.transpose();
    }
    cov /= count - 1.0;
    MomentPair { mean, cov }
}

/// Draws the sum `x = l + b` two ways: (i) both components stochastic, and
/// (ii) the offset collapsed to a point mass with its covariance moved into
/// the stochastic component. Returns the empirical moments of both schemes;
/// tests use this to confirm the two parameterizations agree in distribution.
pub fn reparameterized_sum_check(
    mu_l: &DVector<f64>,
    sigma_l: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    sigma_b: &DMatrix<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<(MomentPair, MomentPair)> {
    let n = mu_l.len();
    if mu_b.len() != n || sigma_l.shape() != (n, n) || sigma_b.shape() != (n, n) {
        return Err(PdldsError::dims("reparameterized_sum_check", n, mu_b.len()));
    }
    if n_draws < 2 {
        return Err(PdldsError::value("reparameterized_sum_check", "need at least 2 draws"));
    }
    let chol_l = cholesky_jittered(sigma_l, 1e-12).ok_or(PdldsError::NotPositiveDefinite { t: 0 })?;
    let chol_b = cholesky_jittered(sigma_b, 1e-12).ok_or(PdldsError::NotPositiveDefinite { t: 0 })?;
    let combined = sigma_l + sigma_b;
    let chol_c = cholesky_jittered(&combined, 1e-12).ok_or(PdldsError::NotPositiveDefinite { t: 0 })?;

    let mut rng = derive_rng(seed, &[17]);
    let mut separate = Vec::with_capacity(n_draws);
    let mut collapsed = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let l = sample_normal_chol(mu_l, &chol_l, &mut rng);
        let b = sample_normal_chol(mu_b, &chol_b, &mut rng);
        separate.push(l + b);
        let l2 = sample_normal_chol(mu_l, &chol_c, &mut rng);
        collapsed.push(l2 + mu_b);
    }
    Ok((empirical_moments(&separate), empirical_moments(&collapsed)))
}

/// Draws a joint trajectory sample and its log density from a smoothed
/// posterior; see [`StatePosterior::sample_joint`].
pub fn sample_state_posterior<R: Rng>(post: &StatePosterior, rng: &mut R) -> Result<(DMatrix<f64>, f64)> {
    post.sample_joint(rng)
}
