//! Generative model: parameter and posterior containers, density evaluation,
//! transition composition, and the evidence lower bound.
//!
//! The latent state decomposes as `x_t = l_t + b_t` where `l` carries the fast
//! stochastic dynamics and `b` is a deterministic slow offset. Transitions are
//! `l_{t+1} = l_t + F_t l_t + noise` with `F_t` a sparse linear combination of
//! dynamic operators. Coefficients evolve under a Gaussian scale-mixture with
//! an inverse-gamma hyperprior centered on the previous step.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{PdldsError, Result};
use crate::linalg::{
    check_finite, check_positive, cholesky_jittered, log_inv_gamma, log_normal_chol,
    log_normal_diag, sample_normal_chol, symmetrize,
};
use crate::rng::{derive_rng, streams};

/// Floor applied to inverse-gamma scale parameters; keeps log densities finite
/// when the previous coefficient is exactly zero.
pub const BETA_FLOOR: f64 = 1e-8;
/// Floor on prior variances during sparse-regression iterations.
pub const GAMMA_FLOOR: f64 = 1e-10;
/// Floor on learned noise variances.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// All learned quantities of the model.
///
/// Noise covariances are stored as diagonals; the M-step only supports
/// diagonal structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    /// Dictionary of K dynamic operators, each N x N.
    pub dynamic_operators: Vec<DMatrix<f64>>,
    /// Observation map, M x N.
    pub obs_matrix: DMatrix<f64>,
    /// Observation offset, length M.
    pub obs_offset: DVector<f64>,
    /// Diagonal of the observation noise covariance, length M.
    pub obs_noise_var: DVector<f64>,
    /// Diagonal of the state noise covariance, length N.
    pub state_noise_var: DVector<f64>,
    /// Diagonal of the coefficient smoothness covariance, length K.
    pub coef_smooth_var: DVector<f64>,
    /// Initial state mean, length N.
    pub init_state_mean: DVector<f64>,
    /// Diagonal of the initial state covariance, length N.
    pub init_state_var: DVector<f64>,
}

impl ModelParameters {
    pub fn new(
        dynamic_operators: Vec<DMatrix<f64>>,
        obs_matrix: DMatrix<f64>,
        obs_offset: DVector<f64>,
        obs_noise_var: DVector<f64>,
        state_noise_var: DVector<f64>,
        coef_smooth_var: DVector<f64>,
        init_state_mean: DVector<f64>,
        init_state_var: DVector<f64>,
    ) -> Result<Self> {
        let p = ModelParameters {
            dynamic_operators,
            obs_matrix,
            obs_offset,
            obs_noise_var,
            state_noise_var,
            coef_smooth_var,
            init_state_mean,
            init_state_var,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_latent();
        let m = self.n_obs();
        let k = self.n_operators();
        if k < 1 || n < 1 {
            return Err(PdldsError::value("ModelParameters", "need K >= 1 and N >= 1"));
        }
        if m < n {
            return Err(PdldsError::dims("ModelParameters", format!("M >= N = {n}"), format!("M = {m}")));
        }
        for (idx, f) in self.dynamic_operators.iter().enumerate() {
            if f.nrows() != n || f.ncols() != n {
                return Err(PdldsError::dims(
                    "dynamic_operators",
                    format!("{n}x{n}"),
                    format!("operator {idx}: {}x{}", f.nrows(), f.ncols()),
                ));
            }
            check_finite(f, "dynamic_operators")?;
        }
        if self.obs_matrix.ncols() != n {
            return Err(PdldsError::dims("obs_matrix", format!("Mx{n}"), format!("{}x{}", m, self.obs_matrix.ncols())));
        }
        if self.obs_offset.len() != m || self.obs_noise_var.len() != m {
            return Err(PdldsError::dims("obs_offset/obs_noise_var", m, self.obs_offset.len()));
        }
        if self.state_noise_var.len() != n || self.init_state_mean.len() != n || self.init_state_var.len() != n {
            return Err(PdldsError::dims("state vectors", n, self.state_noise_var.len()));
        }
        if self.coef_smooth_var.len() != k {
            return Err(PdldsError::dims("coef_smooth_var", k, self.coef_smooth_var.len()));
        }
        check_finite(&self.obs_matrix, "obs_matrix")?;
        check_positive(&self.obs_noise_var, "obs_noise_var")?;
        check_positive(&self.state_noise_var, "state_noise_var")?;
        check_positive(&self.coef_smooth_var, "coef_smooth_var")?;
        check_positive(&self.init_state_var, "init_state_var")?;
        Ok(())
    }

    pub fn n_latent(&self) -> usize {
        self.dynamic_operators.first().map_or(self.obs_matrix.ncols(), |f| f.nrows())
    }

    pub fn n_obs(&self) -> usize {
        self.obs_matrix.nrows()
    }

    pub fn n_operators(&self) -> usize {
        self.dynamic_operators.len()
    }
}

/// Returns the composed transition `F = sum_k f_k * coefs_k`.
pub fn compose_transition(params: &ModelParameters, coefs: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = params.n_operators();
    if coefs.len() != k {
        return Err(PdldsError::dims("compose_transition", k, coefs.len()));
    }
    let n = params.n_latent();
    let mut f = DMatrix::<f64>::zeros(n, n);
    for (op, &c) in params.dynamic_operators.iter().zip(coefs.iter()) {
        if c != 0.0 {
            f += op * c;
        }
    }
    Ok(f)
}

/// Gaussian smoothed marginals over the fast latent plus deterministic offsets.
///
/// A point evaluation (a sample or a mean plug-in) is represented by the same
/// type with zero covariances; see [`StatePosterior::point`].
#[derive(Debug, Clone)]
pub struct StatePosterior {
    /// Smoothed means of the fast latent, T x N.
    pub smooth_mean: DMatrix<f64>,
    /// Smoothed covariances, one N x N matrix per step.
    pub smooth_var: Vec<DMatrix<f64>>,
    /// Lag-one cross covariances Cov(l_t, l_{t+1}), length T - 1.
    pub pair_cov: Vec<DMatrix<f64>>,
    /// Deterministic offset estimates, T x N.
    pub offsets: DMatrix<f64>,
    /// smooth_mean + offsets, T x N.
    pub reconstructed_state: DMatrix<f64>,
    /// Log marginal likelihood from the forward filter pass (NaN for point
    /// evaluations).
    pub log_likelihood: f64,
}

impl StatePosterior {
    /// Wraps point values of the fast latent and offsets as a degenerate
    /// posterior with zero covariance.
    pub fn point(latents: DMatrix<f64>, offsets: DMatrix<f64>) -> Result<Self> {
        if latents.shape() != offsets.shape() {
            return Err(PdldsError::dims(
                "StatePosterior::point",
                format!("{:?}", latents.shape()),
                format!("{:?}", offsets.shape()),
            ));
        }
        let (t_len, n) = latents.shape();
        let reconstructed = &latents + &offsets;
        Ok(StatePosterior {
            smooth_mean: latents,
            smooth_var: vec![DMatrix::zeros(n, n); t_len],
            pair_cov: vec![DMatrix::zeros(n, n); t_len.saturating_sub(1)],
            offsets,
            reconstructed_state: reconstructed,
            log_likelihood: f64::NAN,
        })
    }

    pub fn len(&self) -> usize {
        self.smooth_mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draws a joint sample of the fast latent trajectory and returns it with
    /// its log density under the posterior.
    ///
    /// Uses the backward factorization q(l_T) prod q(l_t | l_{t+1}) built from
    /// the smoothed marginals and lag-one covariances.
    pub fn sample_joint<R: Rng>(&self, rng: &mut R) -> Result<(DMatrix<f64>, f64)> {
        let sampler = JointSampler::new(self)?;
        Ok(sampler.draw(rng))
    }
}

/// Precomputed backward-conditional factors of the state posterior.
pub(crate) struct JointSampler {
    means: Vec<DVector<f64>>,
    last_chol: Cholesky<f64, nalgebra::Dyn>,
    /// Per t < T-1: gain G_t = P_t Sigma_{t+1}^{-1} and Cholesky of the
    /// conditional covariance of l_t given l_{t+1}.
    gains: Vec<DMatrix<f64>>,
    cond_chols: Vec<Cholesky<f64, nalgebra::Dyn>>,
}

impl JointSampler {
    pub(crate) fn new(post: &StatePosterior) -> Result<Self> {
        let t_len = post.len();
        if t_len == 0 {
            return Err(PdldsError::value("sample_joint", "empty posterior"));
        }
        let means: Vec<DVector<f64>> = (0..t_len).map(|t| post.smooth_mean.row(t).transpose()).collect();
        let last_chol = cholesky_jittered(&post.smooth_var[t_len - 1], 1e-12)
            .ok_or(PdldsError::NotPositiveDefinite { t: t_len - 1 })?;
        let mut gains = Vec::with_capacity(t_len.saturating_sub(1));
        let mut cond_chols = Vec::with_capacity(t_len.saturating_sub(1));
        for t in 0..t_len.saturating_sub(1) {
            let next_chol = cholesky_jittered(&post.smooth_var[t + 1], 1e-12)
                .ok_or(PdldsError::NotPositiveDefinite { t: t + 1 })?;
            // G = P_t Sigma_{t+1}^{-1}, via Sigma_{t+1} X = P_t^T.
            let g = next_chol.solve(&post.pair_cov[t].transpose()).transpose();
            let mut cond = &post.smooth_var[t] - &g * post.pair_cov[t].transpose();
            symmetrize(&mut cond);
            let cond_chol =
                cholesky_jittered(&cond, 1e-12).ok_or(PdldsError::NotPositiveDefinite { t })?;
            gains.push(g);
            cond_chols.push(cond_chol);
        }
        Ok(JointSampler { means, last_chol, gains, cond_chols })
    }

    pub(crate) fn draw<R: Rng>(&self, rng: &mut R) -> (DMatrix<f64>, f64) {
        let t_len = self.means.len();
        let n = self.means[0].len();
        let mut sample = DMatrix::<f64>::zeros(t_len, n);
        let last = sample_normal_chol(&self.means[t_len - 1], &self.last_chol, rng);
        let mut log_q = log_normal_chol(&last, &self.means[t_len - 1], &self.last_chol);
        sample.row_mut(t_len - 1).copy_from(&last.transpose());
        let mut next = last;
        for t in (0..t_len.saturating_sub(1)).rev() {
            let cond_mean = &self.means[t] + &self.gains[t] * (&next - &self.means[t + 1]);
            let draw = sample_normal_chol(&cond_mean, &self.cond_chols[t], rng);
            log_q += log_normal_chol(&draw, &cond_mean, &self.cond_chols[t]);
            sample.row_mut(t).copy_from(&draw.transpose());
            next = draw;
        }
        (sample, log_q)
    }
}

/// Per-step Gaussian posteriors over the sparse coefficients.
#[derive(Debug, Clone)]
pub struct CoefficientPosterior {
    /// Posterior means, T x K; masked-out entries are exactly zero.
    pub means: DMatrix<f64>,
    /// Posterior variances, T x K.
    pub variances: DMatrix<f64>,
    /// Active-support mask; inactive coefficients are point masses at zero.
    pub active_mask: DMatrix<bool>,
}

impl CoefficientPosterior {
    /// Builds the posterior, deriving the active mask as |mean| > eta and
    /// zeroing inactive means.
    pub fn new(mut means: DMatrix<f64>, variances: DMatrix<f64>, eta: f64) -> Result<Self> {
        if means.shape() != variances.shape() {
            return Err(PdldsError::dims(
                "CoefficientPosterior",
                format!("{:?}", means.shape()),
                format!("{:?}", variances.shape()),
            ));
        }
        for v in variances.iter() {
            if !(v.is_finite() && *v > 0.0) {
                return Err(PdldsError::value("CoefficientPosterior", format!("variance {v} must be positive")));
            }
        }
        let active_mask = DMatrix::from_fn(means.nrows(), means.ncols(), |i, j| means[(i, j)].abs() > eta);
        for i in 0..means.nrows() {
            for j in 0..means.ncols() {
                if !active_mask[(i, j)] {
                    means[(i, j)] = 0.0;
                }
            }
        }
        Ok(CoefficientPosterior { means, variances, active_mask })
    }

    /// Draws coefficients: active entries from their Gaussians, inactive
    /// entries stay exactly zero. Returns the draw and its log density
    /// (inactive point masses contribute zero).
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (DMatrix<f64>, f64) {
        let mut out = DMatrix::<f64>::zeros(self.means.nrows(), self.means.ncols());
        let mut log_q = 0.0;
        for i in 0..self.means.nrows() {
            for j in 0..self.means.ncols() {
                if self.active_mask[(i, j)] {
                    let sd = self.variances[(i, j)].sqrt();
                    let z: f64 = rng.sample(StandardNormal);
                    let c = self.means[(i, j)] + sd * z;
                    out[(i, j)] = c;
                    log_q += crate::linalg::log_normal_scalar(c, self.means[(i, j)], self.variances[(i, j)]);
                }
            }
        }
        (out, log_q)
    }

    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.nrows() == 0
    }
}

/// Per-step inverse-gamma posteriors over the sparsity variances.
#[derive(Debug, Clone)]
pub struct GammaPosterior {
    /// Shape parameters, T x K.
    pub shape: DMatrix<f64>,
    /// Scale parameters, T x K; floored at [`BETA_FLOOR`].
    pub scale: DMatrix<f64>,
}

impl GammaPosterior {
    pub fn new(shape: DMatrix<f64>, scale: DMatrix<f64>) -> Result<Self> {
        if shape.shape() != scale.shape() {
            return Err(PdldsError::dims(
                "GammaPosterior",
                format!("{:?}", shape.shape()),
                format!("{:?}", scale.shape()),
            ));
        }
        for s in shape.iter() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(PdldsError::value("GammaPosterior", "shape must be positive"));
            }
        }
        for s in scale.iter() {
            if !(s.is_finite() && *s >= BETA_FLOOR) {
                return Err(PdldsError::value("GammaPosterior", format!("scale {s} below floor")));
            }
        }
        Ok(GammaPosterior { shape, scale })
    }

    /// Posterior means scale / (shape - 1); requires every shape > 1.
    pub fn means(&self) -> Result<DMatrix<f64>> {
        for s in self.shape.iter() {
            if *s <= 1.0 {
                return Err(PdldsError::value(
                    "GammaPosterior::means",
                    format!("shape {s} <= 1 has no finite mean; increase xi or n_samples"),
                ));
            }
        }
        Ok(DMatrix::from_fn(self.shape.nrows(), self.shape.ncols(), |i, j| {
            self.scale[(i, j)] / (self.shape[(i, j)] - 1.0)
        }))
    }

    /// Posterior modes scale / (shape + 1); finite for any positive shape.
    pub fn modes(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.shape.nrows(), self.shape.ncols(), |i, j| {
            self.scale[(i, j)] / (self.shape[(i, j)] + 1.0)
        })
    }

    /// Draws one variance per entry and returns the draw with the log density
    /// summed over rows `from_row..`.
    pub fn sample_from_row<R: Rng>(&self, from_row: usize, rng: &mut R) -> (DMatrix<f64>, f64) {
        let (t_len, k) = self.shape.shape();
        let mut out = DMatrix::<f64>::zeros(t_len, k);
        let mut log_q = 0.0;
        for i in 0..t_len {
            for j in 0..k {
                let alpha = self.shape[(i, j)];
                let beta = self.scale[(i, j)];
                // 1 / Gamma(alpha, scale = 1/beta) is inverse-gamma(alpha, beta).
                let g = Gamma::new(alpha, 1.0 / beta).expect("valid gamma").sample(rng);
                let draw = (1.0 / g).max(f64::MIN_POSITIVE);
                out[(i, j)] = draw;
                if i >= from_row {
                    log_q += log_inv_gamma(draw, alpha, beta);
                }
            }
        }
        (out, log_q)
    }

    pub fn len(&self) -> usize {
        self.shape.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.nrows() == 0
    }
}

/// Ground-truth annotations attached to a generated trial.
#[derive(Debug, Clone)]
pub struct TrialTruth {
    /// True latent trajectory, T x N.
    pub latents: DMatrix<f64>,
    /// Discrete regime label per step.
    pub switch_labels: Vec<i64>,
    /// Speed constant per step.
    pub speeds: Vec<f64>,
}

/// One observation sequence with optional ground truth.
#[derive(Debug, Clone)]
pub struct Trial {
    /// Observations, T x M.
    pub obs: DMatrix<f64>,
    pub truth: Option<TrialTruth>,
}

/// A collection of trials sharing the observation dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trials: Vec<Trial>,
    /// Informational sampling rate.
    pub sample_rate: f64,
}

impl Dataset {
    pub fn new(trials: Vec<Trial>, sample_rate: f64) -> Result<Self> {
        if let Some(first) = trials.first() {
            let m = first.obs.ncols();
            for (i, tr) in trials.iter().enumerate() {
                if tr.obs.ncols() != m {
                    return Err(PdldsError::dims("Dataset", format!("M = {m}"), format!("trial {i}: M = {}", tr.obs.ncols())));
                }
                if tr.obs.nrows() < 2 {
                    return Err(PdldsError::value("Dataset", format!("trial {i} has T < 2")));
                }
                if let Some(truth) = &tr.truth {
                    let t_len = tr.obs.nrows();
                    if truth.latents.nrows() != t_len
                        || truth.switch_labels.len() != t_len
                        || truth.speeds.len() != t_len
                    {
                        return Err(PdldsError::dims("Dataset truth", t_len, truth.latents.nrows()));
                    }
                }
            }
        }
        Ok(Dataset { trials, sample_rate })
    }

    pub fn obs_dim(&self) -> Option<usize> {
        self.trials.first().map(|t| t.obs.ncols())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

fn validate_log_joint_inputs(
    params: &ModelParameters,
    states: &StatePosterior,
    coefs: &DMatrix<f64>,
    gammas: &DMatrix<f64>,
    obs: &DMatrix<f64>,
    xi: f64,
) -> Result<()> {
    let t_len = obs.nrows();
    let n = params.n_latent();
    let m = params.n_obs();
    let k = params.n_operators();
    if obs.ncols() != m {
        return Err(PdldsError::dims("log_joint obs", m, obs.ncols()));
    }
    if states.len() != t_len || states.smooth_mean.ncols() != n {
        return Err(PdldsError::dims("log_joint states", format!("{t_len}x{n}"), format!("{}x{}", states.len(), states.smooth_mean.ncols())));
    }
    if coefs.nrows() != t_len || coefs.ncols() != k {
        return Err(PdldsError::dims("log_joint coefs", format!("{t_len}x{k}"), format!("{}x{}", coefs.nrows(), coefs.ncols())));
    }
    if gammas.nrows() != t_len || gammas.ncols() != k {
        return Err(PdldsError::dims("log_joint gammas", format!("{t_len}x{k}"), format!("{}x{}", gammas.nrows(), gammas.ncols())));
    }
    if !(xi > 0.0) {
        return Err(PdldsError::value("log_joint", format!("xi = {xi} must be positive")));
    }
    for g in gammas.iter() {
        if !(*g > 0.0 && g.is_finite()) {
            return Err(PdldsError::value("log_joint", format!("gamma {g} must be positive")));
        }
    }
    Ok(())
}

/// Log joint density of states, observations, coefficients, and variance
/// hyperparameters under the generative model.
///
/// `states` is read as a point evaluation: `smooth_mean` holds the fast
/// latent, `offsets` the slow component. The coefficient transition factors
/// are products of the smoothness Gaussian and the shrinkage Gaussian; the
/// hyperprior scale is floored at [`BETA_FLOOR`] so sparse coefficients keep
/// the density finite. Row 0 of `gammas` parameterizes nothing and is not
/// evaluated (the first coefficient step has no hyperprior factor).
pub fn log_joint(
    params: &ModelParameters,
    states: &StatePosterior,
    coefs: &DMatrix<f64>,
    gammas: &DMatrix<f64>,
    obs: &DMatrix<f64>,
    xi: f64,
) -> Result<f64> {
    validate_log_joint_inputs(params, states, coefs, gammas, obs, xi)?;
    let t_len = obs.nrows();
    let mut total = 0.0;

    // Initial state density evaluated at x_1 = l_1 + b_1.
    let x1 = states.reconstructed_state.row(0).transpose();
    total += log_normal_diag(&x1, &params.init_state_mean, &params.init_state_var);

    // Observation terms.
    for t in 0..t_len {
        let x_t = states.reconstructed_state.row(t).transpose();
        let mean = &params.obs_matrix * x_t + &params.obs_offset;
        let y_t = obs.row(t).transpose();
        total += log_normal_diag(&y_t, &mean, &params.obs_noise_var);
    }

    // State transitions on the fast component.
    for t in 0..t_len.saturating_sub(1) {
        let l_t = states.smooth_mean.row(t).transpose();
        let l_next = states.smooth_mean.row(t + 1).transpose();
        let f_t = compose_transition(params, &coefs.row(t).transpose())?;
        let mean = &l_t + f_t * &l_t;
        total += log_normal_diag(&l_next, &mean, &params.state_noise_var);
    }

    // Coefficient transitions and inverse-gamma hyperpriors.
    for t in 0..t_len.saturating_sub(1) {
        for k in 0..params.n_operators() {
            let c_prev = coefs[(t, k)];
            let c_next = coefs[(t + 1, k)];
            let gamma_next = gammas[(t + 1, k)];
            let sigma2 = params.coef_smooth_var[k];
            total += crate::linalg::log_normal_scalar(c_next, c_prev, sigma2);
            total += crate::linalg::log_normal_scalar(c_next, 0.0, gamma_next);
            let beta = (xi * c_prev * c_prev).max(BETA_FLOOR);
            total += log_inv_gamma(gamma_next, xi, beta);
        }
    }
    Ok(total)
}

/// Monte-Carlo ELBO estimate.
#[derive(Debug, Clone, Copy)]
pub struct ElboEstimate {
    pub value: f64,
    /// Standard error of the estimate; NaN when `n_samples == 1`.
    pub std_error: f64,
}

/// Monte-Carlo estimate of `E_q[log p - log q]` with `n_samples` seeded draws.
///
/// The deterministic offset component and inactive (point-mass) coefficients
/// contribute zero entropy. Row 0 of the variance posterior is excluded from
/// both sides: the first-step variance has no factor in the joint and only
/// supplies the variance of q(c_1).
pub fn elbo(
    params: &ModelParameters,
    q_state: &StatePosterior,
    q_coef: &CoefficientPosterior,
    q_gamma: &GammaPosterior,
    obs: &DMatrix<f64>,
    xi: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    if n_samples < 1 {
        return Err(PdldsError::value("elbo", "n_samples must be >= 1"));
    }
    let t_len = obs.nrows();
    if q_coef.len() != t_len || q_gamma.len() != t_len || q_state.len() != t_len {
        return Err(PdldsError::dims("elbo posteriors", t_len, q_coef.len()));
    }
    let sampler = JointSampler::new(q_state)?;
    let mut draws = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng: ChaCha8Rng = derive_rng(seed, &[streams::ELBO, i as u64]);
        let (l_sample, log_q_l) = sampler.draw(&mut rng);
        let (c_sample, log_q_c) = q_coef.sample(&mut rng);
        let (g_sample, log_q_g) = q_gamma.sample_from_row(1, &mut rng);
        let point = StatePosterior::point(l_sample, q_state.offsets.clone())?;
        let log_p = log_joint(params, &point, &c_sample, &g_sample, obs, xi)?;
        draws.push(log_p - log_q_l - log_q_c - log_q_g);
    }
    let value = draws.iter().sum::<f64>() / n_samples as f64;
    let std_error = if n_samples > 1 {
        let var = draws.iter().map(|d| (d - value) * (d - value)).sum::<f64>() / (n_samples as f64 - 1.0);
        (var / n_samples as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(ElboEstimate { value, std_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::LN_2PI;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
        }};
    }

    fn scalar_params() -> ModelParameters {
        ModelParameters::new(
            vec![DMatrix::from_element(1, 1, 0.0)],
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    fn random_params(n: usize, m: usize, k: usize, seed: u64) -> ModelParameters {
        let mut rng = derive_rng(seed, &[99]);
        let mut mat = |r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let ops = (0..k).map(|_| mat(n, n)).collect();
        let obs = mat(m, n);
        let mut rng2 = derive_rng(seed, &[100]);
        let mut posv = |len: usize| DVector::from_fn(len, |_, _| 0.5 + rng2.sample::<f64, _>(StandardNormal).abs());
        ModelParameters::new(
            ops,
            obs,
            DVector::zeros(m),
            posv(m),
            posv(n),
            posv(k),
            DVector::zeros(n),
            posv(n),
        )
        .unwrap()
    }

    #[test]
    fn compose_one_hot_returns_operator() {
        let params = random_params(3, 4, 3, 1);
        for k in 0..3 {
            let mut c = DVector::zeros(3);
            c[k] = 1.0;
            let f = compose_transition(&params, &c).unwrap();
            assert_eq!(f, params.dynamic_operators[k]);
        }
    }

    #[test]
    fn compose_zero_coefs_gives_zero_matrix() {
        let params = random_params(2, 3, 2, 2);
        let f = compose_transition(&params, &DVector::zeros(2)).unwrap();
        assert_eq!(f, DMatrix::zeros(2, 2));
    }

    #[test]
    fn compose_matches_elementwise_sum() {
        // Oracle: direct elementwise summation.
        let params = random_params(3, 3, 2, 3);
        let coefs = DVector::from_vec(vec![0.5, -1.3]);
        let f = compose_transition(&params, &coefs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = 0.5 * params.dynamic_operators[0][(i, j)] - 1.3 * params.dynamic_operators[1][(i, j)];
                assert_close!(f[(i, j)], expect, 1e-15);
            }
        }
    }

    #[test]
    fn compose_is_linear_in_coefs() {
        let params = random_params(2, 2, 3, 4);
        let mut rng = derive_rng(11, &[0]);
        for _ in 0..20 {
            let c1 = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let c2 = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (a, b) = (0.7, -2.1);
            let lhs = compose_transition(&params, &(&c1 * a + &c2 * b)).unwrap();
            let rhs = compose_transition(&params, &c1).unwrap() * a + compose_transition(&params, &c2).unwrap() * b;
            assert!((lhs - rhs).abs().max() < 1e-12);
        }
    }

    #[test]
    fn compose_rejects_wrong_length() {
        let params = random_params(2, 2, 3, 5);
        assert!(compose_transition(&params, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn log_joint_t1_has_no_transition_terms() {
        let params = scalar_params();
        let states = StatePosterior::point(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let obs = DMatrix::zeros(1, 1);
        let coefs = DMatrix::zeros(1, 1);
        let gammas = DMatrix::from_element(1, 1, 1.0);
        let lj = log_joint(&params, &states, &coefs, &gammas, &obs, 1.0).unwrap();
        // log N(0;0,1) for the initial state plus one observation term.
        assert_close!(lj, -LN_2PI, 1e-12);
    }

    #[test]
    fn log_joint_scalar_hand_value() {
        // T=3 scalar case: one initial + three observation + two state
        // transition + four coefficient Gaussians, each -0.5*ln(2*pi), plus
        // two floored inverse-gamma terms log IG(1; 1, BETA_FLOOR).
        let params = scalar_params();
        let t_len = 3;
        let states = StatePosterior::point(DMatrix::zeros(t_len, 1), DMatrix::zeros(t_len, 1)).unwrap();
        let obs = DMatrix::zeros(t_len, 1);
        let coefs = DMatrix::zeros(t_len, 1);
        let gammas = DMatrix::from_element(t_len, 1, 1.0);
        let lj = log_joint(&params, &states, &coefs, &gammas, &obs, 1.0).unwrap();
        let gaussians = -0.5 * LN_2PI * (1.0 + 3.0 + 2.0 + 4.0) as f64;
        let ig = 2.0 * (BETA_FLOOR.ln() - BETA_FLOOR);
        assert_close!(lj, gaussians + ig, 1e-10);
    }

    #[test]
    fn log_joint_decomposes_per_factor() {
        // Oracle: recompute every factor independently and sum.
        let params = random_params(2, 3, 2, 6);
        let t_len = 4;
        let mut rng = derive_rng(21, &[7]);
        let l = DMatrix::from_fn(t_len, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(t_len, 2, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let coefs = DMatrix::from_fn(t_len, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let gammas = DMatrix::from_fn(t_len, 2, |_, _| 0.2 + rng.sample::<f64, _>(StandardNormal).abs());
        let obs = DMatrix::from_fn(t_len, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = 0.8;
        let states = StatePosterior::point(l.clone(), b.clone()).unwrap();
        let lj = log_joint(&params, &states, &coefs, &gammas, &obs, xi).unwrap();

        let x = &l + &b;
        let mut expect = log_normal_diag(&x.row(0).transpose(), &params.init_state_mean, &params.init_state_var);
        for t in 0..t_len {
            let mean = &params.obs_matrix * x.row(t).transpose() + &params.obs_offset;
            expect += log_normal_diag(&obs.row(t).transpose(), &mean, &params.obs_noise_var);
        }
        for t in 0..t_len - 1 {
            let f = &params.dynamic_operators[0] * coefs[(t, 0)] + &params.dynamic_operators[1] * coefs[(t, 1)];
            let mean = l.row(t).transpose() + f * l.row(t).transpose();
            expect += log_normal_diag(&l.row(t + 1).transpose(), &mean, &params.state_noise_var);
            for k in 0..2 {
                expect += crate::linalg::log_normal_scalar(coefs[(t + 1, k)], coefs[(t, k)], params.coef_smooth_var[k]);
                expect += crate::linalg::log_normal_scalar(coefs[(t + 1, k)], 0.0, gammas[(t + 1, k)]);
                expect += log_inv_gamma(gammas[(t + 1, k)], xi, (xi * coefs[(t, k)].powi(2)).max(BETA_FLOOR));
            }
        }
        assert_close!(lj, expect, 1e-10);
    }

    #[test]
    fn log_joint_obs_term_shifts_with_doubled_noise() {
        let params = random_params(2, 3, 2, 8);
        let t_len = 5;
        let mut rng = derive_rng(31, &[7]);
        let l = DMatrix::from_fn(t_len, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::zeros(t_len, 2);
        let states = StatePosterior::point(l.clone(), b).unwrap();
        // Exact observations: y_t = D x_t + d.
        let mut obs = DMatrix::zeros(t_len, 3);
        for t in 0..t_len {
            let y = &params.obs_matrix * l.row(t).transpose() + &params.obs_offset;
            obs.row_mut(t).copy_from(&y.transpose());
        }
        let coefs = DMatrix::zeros(t_len, 2);
        let gammas = DMatrix::from_element(t_len, 2, 1.0);
        let base = log_joint(&params, &states, &coefs, &gammas, &obs, 1.0).unwrap();
        let mut doubled = params.clone();
        doubled.obs_noise_var *= 2.0;
        let shifted = log_joint(&doubled, &states, &coefs, &gammas, &obs, 1.0).unwrap();
        assert_close!(base - shifted, 0.5 * (t_len as f64) * 3.0 * 2.0_f64.ln(), 1e-10);
    }

    #[test]
    fn log_joint_rejects_nonpositive_gamma() {
        let params = scalar_params();
        let states = StatePosterior::point(DMatrix::zeros(2, 1), DMatrix::zeros(2, 1)).unwrap();
        let obs = DMatrix::zeros(2, 1);
        let coefs = DMatrix::zeros(2, 1);
        let gammas = DMatrix::from_element(2, 1, 0.0);
        assert!(log_joint(&params, &states, &coefs, &gammas, &obs, 1.0).is_err());
    }

    #[test]
    fn masked_coefficients_stay_exactly_zero_in_samples() {
        let means = DMatrix::from_row_slice(3, 2, &[0.5, 1e-6, 0.0, 0.3, 2e-5, -0.9]);
        let vars = DMatrix::from_element(3, 2, 0.04);
        let q = CoefficientPosterior::new(means, vars, 1e-4).unwrap();
        assert!(q.active_mask[(0, 0)] && !q.active_mask[(0, 1)]);
        assert_eq!(q.means[(0, 1)], 0.0);
        let mut rng = derive_rng(5, &[1]);
        let (draw, _) = q.sample(&mut rng);
        assert_eq!(draw[(0, 1)], 0.0);
        assert_eq!(draw[(1, 0)], 0.0);
        assert_eq!(draw[(2, 0)], 0.0);
        assert_ne!(draw[(0, 0)], 0.0);
    }

    #[test]
    fn gamma_posterior_mean_requires_shape_above_one() {
        let g = GammaPosterior::new(DMatrix::from_element(1, 1, 0.9), DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!(g.means().is_err());
        let g = GammaPosterior::new(DMatrix::from_element(1, 1, 2.5), DMatrix::from_element(1, 1, 3.0)).unwrap();
        assert_close!(g.means().unwrap()[(0, 0)], 2.0, 1e-12);
    }

    #[test]
    fn elbo_rejects_zero_samples() {
        let params = scalar_params();
        let post = StatePosterior {
            smooth_mean: DMatrix::zeros(2, 1),
            smooth_var: vec![DMatrix::from_element(1, 1, 1.0); 2],
            pair_cov: vec![DMatrix::from_element(1, 1, 0.1)],
            offsets: DMatrix::zeros(2, 1),
            reconstructed_state: DMatrix::zeros(2, 1),
            log_likelihood: 0.0,
        };
        let q_coef = CoefficientPosterior::new(DMatrix::zeros(2, 1), DMatrix::from_element(2, 1, 1.0), 1e-4).unwrap();
        let q_gamma = GammaPosterior::new(DMatrix::from_element(2, 1, 2.0), DMatrix::from_element(2, 1, 1.0)).unwrap();
        let obs = DMatrix::zeros(2, 1);
        assert!(elbo(&params, &post, &q_coef, &q_gamma, &obs, 1.0, 0, 7).is_err());
    }

    #[test]
    fn elbo_estimates_consistent_across_sample_counts() {
        let params = scalar_params();
        let post = StatePosterior {
            smooth_mean: DMatrix::from_fn(3, 1, |i, _| 0.2 * i as f64),
            smooth_var: vec![DMatrix::from_element(1, 1, 0.5); 3],
            pair_cov: vec![DMatrix::from_element(1, 1, 0.1); 2],
            offsets: DMatrix::zeros(3, 1),
            reconstructed_state: DMatrix::from_fn(3, 1, |i, _| 0.2 * i as f64),
            log_likelihood: 0.0,
        };
        let q_coef = CoefficientPosterior::new(
            DMatrix::from_element(3, 1, 0.4),
            DMatrix::from_element(3, 1, 0.09),
            1e-4,
        )
        .unwrap();
        let q_gamma = GammaPosterior::new(DMatrix::from_element(3, 1, 2.0), DMatrix::from_element(3, 1, 1.5)).unwrap();
        let obs = DMatrix::from_fn(3, 1, |i, _| 0.1 * i as f64);
        let one = elbo(&params, &post, &q_coef, &q_gamma, &obs, 1.0, 1, 42).unwrap();
        let many = elbo(&params, &post, &q_coef, &q_gamma, &obs, 1.0, 1000, 42).unwrap();
        // A single draw is itself a sample of the estimator; the difference
        // has standard deviation sd * sqrt(1 + 1/1000).
        let sd = many.std_error * (1000.0f64).sqrt();
        assert!((one.value - many.value).abs() < 3.0 * sd * (1.0f64 + 1.0 / 1000.0).sqrt());
    }
}
