//! Variational EM: initialization, the coordinate-ascent E-step, the
//! gradient M-step, and convergence monitoring.
//!
//! One outer iteration updates, in order: offsets by moving average, a
//! coefficient draw, the composed time-varying model, the state smoother, the
//! per-step sparse initialization, the gradient refinement of active
//! coefficients, the closed-form variance posterior, and finally the model
//! parameters. The ELBO is recorded after every iteration with common random
//! numbers across iterations so the trace converges instead of fluctuating at
//! the Monte-Carlo noise floor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coef::{refine_coefs_sgd, sbl_df_init, support_mask, update_gamma_expected, SparseRegressionProblem};
use crate::error::{PdldsError, Result};
use crate::model::{
    elbo, CoefficientPosterior, Dataset, GammaPosterior, ModelParameters, StatePosterior,
    BETA_FLOOR, GAMMA_FLOOR, VARIANCE_FLOOR,
};
use crate::rng::{derive_rng, mix, streams};
use crate::state::{build_tv_lds, estimate_offsets, kalman_smooth};

/// Moving-average window for the offset estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Whole-trajectory average; the offset reduces to a constant.
    Full,
    Size(usize),
}

impl Window {
    pub fn resolve(&self, t_len: usize) -> usize {
        match self {
            Window::Full => t_len,
            Window::Size(s) => *s,
        }
    }
}

/// Which coefficient estimate conditions the state smoother.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefSource {
    /// Draw from q(c), the stochastic variant.
    Sample,
    /// Plug in the posterior means.
    Mean,
}

/// Whether the per-step sparse initialization threads freshly updated
/// coefficients (sequential) or uses last iteration's values everywhere
/// (parallel, deterministic under concurrency).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SblSweep {
    Parallel,
    Sequential,
}

/// Configuration of a variational EM run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of dynamic operators K.
    pub n_ops: usize,
    /// Latent dimension N.
    pub n_latent: usize,
    pub window: Window,
    /// Dynamics trade-off weight of the variance hyperprior.
    pub xi: f64,
    /// Active-support threshold.
    pub eta: f64,
    /// Samples used for expectations (gamma residuals, ELBO, M-step plug-ins).
    pub n_samples: usize,
    pub max_outer_iters: usize,
    /// Relative ELBO change declaring convergence (over three consecutive
    /// iterations).
    pub elbo_tol: f64,
    /// Adam step size of the M-step.
    pub mstep_step: f64,
    pub mstep_iters: usize,
    /// Outer iterations during which the M-step leaves noise variances at
    /// their initialization. The provisional variances would otherwise absorb
    /// the still-unexplained dynamics and starve the sparse regression of
    /// evidence.
    pub mstep_variance_warmup: usize,
    /// Gradient-ascent step for the coefficient refinement.
    pub sgd_step: f64,
    pub sgd_iters: usize,
    pub sbl_max_iter: usize,
    pub sbl_tol: f64,
    /// Relative scale of the random operator initialization; 1 matches the
    /// latent increment scale.
    pub sigma_init: f64,
    pub seed: u64,
    pub state_coef_source: CoefSource,
    pub sbl_sweep: SblSweep,
}

impl FitConfig {
    /// Defaults for a model with `n_ops` operators and `n_latent` dimensions.
    pub fn defaults(n_ops: usize, n_latent: usize) -> Self {
        FitConfig {
            n_ops,
            n_latent,
            window: Window::Full,
            xi: 1.0,
            eta: 1e-4,
            n_samples: 1,
            max_outer_iters: 100,
            elbo_tol: 1e-5,
            mstep_step: 5e-3,
            mstep_iters: 40,
            mstep_variance_warmup: 8,
            sgd_step: 1e-3,
            sgd_iters: 200,
            sbl_max_iter: 50,
            sbl_tol: 1e-6,
            sigma_init: 1.0,
            seed: 0,
            state_coef_source: CoefSource::Sample,
            sbl_sweep: SblSweep::Sequential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ops < 1 || self.n_latent < 1 {
            return Err(PdldsError::InvalidConfig("need n_ops >= 1 and n_latent >= 1".into()));
        }
        if !(self.xi > 0.0) || !(self.eta > 0.0) || !(self.elbo_tol > 0.0) {
            return Err(PdldsError::InvalidConfig("xi, eta, elbo_tol must be positive".into()));
        }
        if self.n_samples < 1 {
            return Err(PdldsError::InvalidConfig("n_samples must be >= 1".into()));
        }
        if !(self.mstep_step > 0.0) || !(self.sgd_step > 0.0) || !(self.sbl_tol > 0.0) {
            return Err(PdldsError::InvalidConfig("step sizes and tolerances must be positive".into()));
        }
        if self.sbl_max_iter < 1 {
            return Err(PdldsError::InvalidConfig("sbl_max_iter must be >= 1".into()));
        }
        if let Window::Size(s) = self.window {
            if s < 1 {
                return Err(PdldsError::InvalidConfig("window must be >= 1".into()));
            }
        }
        if !(self.sigma_init >= 0.0) {
            return Err(PdldsError::InvalidConfig("sigma_init must be >= 0".into()));
        }
        Ok(())
    }
}

/// Output of [`fit`] and [`infer_on_heldout`]: parameters plus per-trial
/// posteriors and the ELBO history.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParameters,
    pub q_state: Vec<StatePosterior>,
    pub q_coef: Vec<CoefficientPosterior>,
    pub q_gamma: Vec<GammaPosterior>,
    pub elbo_trace: Vec<f64>,
    /// Standard error of each trace entry (NaN when n_samples == 1).
    pub elbo_se_trace: Vec<f64>,
    pub converged: bool,
    pub iterations_run: usize,
}

/// PCA initialization: observation map from the top principal directions,
/// offset from the observation mean, latents from the projection, random
/// operators, and residual-matched noise variances.
pub fn initialize(data: &Dataset, config: &FitConfig) -> Result<(ModelParameters, Vec<DMatrix<f64>>)> {
    config.validate()?;
    let m = data.obs_dim().ok_or_else(|| PdldsError::value("initialize", "empty dataset"))?;
    let n = config.n_latent;
    let k = config.n_ops;
    if n > m {
        return Err(PdldsError::dims("initialize", format!("n_latent <= M = {m}"), n));
    }

    let total_t: usize = data.trials.iter().map(|tr| tr.obs.nrows()).sum();
    let mut obs_mean = DVector::<f64>::zeros(m);
    for tr in &data.trials {
        for t in 0..tr.obs.nrows() {
            obs_mean += tr.obs.row(t).transpose();
        }
    }
    obs_mean /= total_t as f64;

    let mut stacked = DMatrix::<f64>::zeros(total_t, m);
    let mut row = 0;
    for tr in &data.trials {
        for t in 0..tr.obs.nrows() {
            stacked.row_mut(row).copy_from(&(tr.obs.row(t) - obs_mean.transpose()));
            row += 1;
        }
    }

    let svd = stacked.clone().svd(false, true);
    let sigma_max = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > sigma_max * 1e-10 && **s > 0.0).count();
    if rank < n {
        return Err(PdldsError::RankDeficient(rank, n));
    }
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut obs_matrix = DMatrix::<f64>::zeros(m, n);
    for j in 0..n {
        obs_matrix.column_mut(j).copy_from(&v_t.row(j).transpose());
    }

    // Latents are the principal scores: x = D^T (y - d) for orthonormal D.
    let latents: Vec<DMatrix<f64>> = data
        .trials
        .iter()
        .map(|tr| {
            let mut centered = tr.obs.clone();
            for t in 0..centered.nrows() {
                centered.row_mut(t).copy_from(&(tr.obs.row(t) - obs_mean.transpose()));
            }
            &centered * &obs_matrix
        })
        .collect();

    // Residual-matched noise variances.
    let mut obs_noise = DVector::<f64>::zeros(m);
    let mut state_noise = DVector::<f64>::zeros(n);
    let mut state_count = 0usize;
    for (tr, x) in data.trials.iter().zip(&latents) {
        for t in 0..tr.obs.nrows() {
            let resid = tr.obs.row(t).transpose() - &obs_mean - &obs_matrix * x.row(t).transpose();
            for i in 0..m {
                obs_noise[i] += resid[i] * resid[i];
            }
        }
        for t in 0..x.nrows() - 1 {
            let d = x.row(t + 1) - x.row(t);
            for i in 0..n {
                state_noise[i] += d[i] * d[i];
            }
        }
        state_count += x.nrows() - 1;
    }

    obs_noise = obs_noise.map(|v| (v / total_t as f64).max(1e-8));
    state_noise = state_noise.map(|v| (v / state_count.max(1) as f64).max(1e-8));

    let mut init_mean = DVector::<f64>::zeros(n);
    for x in &latents {
        init_mean += x.row(0).transpose();
    }
    init_mean /= latents.len() as f64;
    let mut init_var = DVector::<f64>::zeros(n);
    for x in &latents {
        for t in 0..x.nrows() {
            for i in 0..n {
                let d = x[(t, i)] - init_mean[i];
                init_var[i] += d * d;
            }
        }
    }
    init_var = init_var.map(|v| (v / total_t as f64).max(1e-6));

    // The raw projection increments are noise-dominated; anchoring the state
    // noise to them starves the sparse regressions of evidence (it assumes
    // the dynamics explain nothing). Refine to a fixed point instead: smooth
    // under a random walk, then keep the state noise well under the smoothed
    // increment scale so the dynamics are forced to explain it.
    let mut state_noise = state_noise.map(|v| (v / 100.0).max(1e-8));
    let mut smooth_inc = state_noise.clone();
    for _ in 0..3 {
        let mut acc = DVector::<f64>::zeros(n);
        let mut count = 0usize;
        for (tr, _x) in data.trials.iter().zip(&latents) {
            let t_len = tr.obs.nrows();
            let lds = crate::state::TimeVaryingLDS {
                transitions: vec![DMatrix::identity(n, n); t_len - 1],
                controls: vec![DVector::zeros(n); t_len - 1],
                effective_obs_offset: DMatrix::from_fn(t_len, m, |_, j| obs_mean[j]),
                offsets: DMatrix::zeros(t_len, n),
                obs_noise_var: obs_noise.clone(),
                state_noise_var: state_noise.clone(),
                obs_matrix: obs_matrix.clone(),
                init_state_mean: init_mean.clone(),
                init_state_var: init_var.clone(),
            };
            let post = kalman_smooth(&lds, &tr.obs)?;
            for t in 0..t_len - 1 {
                let d = post.smooth_mean.row(t + 1) - post.smooth_mean.row(t);
                for i in 0..n {
                    acc[i] += d[i] * d[i];
                }
            }
            count += t_len - 1;
        }
        state_noise = acc.map(|v| (v / count.max(1) as f64 / 100.0).max(1e-8));
        smooth_inc = acc.map(|v| v / count.max(1) as f64);
    }

    // Dictionary atoms are kept at unit Frobenius norm (coefficients carry
    // the scale); anything else lets the operator/coefficient product drift.
    let mut rng = derive_rng(config.seed, &[streams::INIT_PARAMS]);
    let operators: Vec<DMatrix<f64>> = (0..k)
        .map(|_| {
            let raw = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = raw.norm();
            if norm > 1e-12 {
                raw * (config.sigma_init / norm)
            } else {
                raw
            }
        })
        .collect();

    // Coefficient scale under unit-norm atoms is increment / state magnitude;
    // start the smoothness variance permitting ~30% per-step changes.
    let mut state_rms = 0.0;
    for x in &latents {
        state_rms += x.norm_squared();
    }
    state_rms = (state_rms / (total_t as f64 * n as f64)).sqrt().max(1e-12);
    let coef_scale = (smooth_inc.sum() / n as f64).sqrt() / (state_rms * (n as f64).sqrt());
    let coef_smooth = ((0.3 * coef_scale).powi(2)).max(1e-8);

    let params = ModelParameters::new(
        operators,
        obs_matrix,
        obs_mean,
        obs_noise,
        state_noise,
        DVector::from_element(k, coef_smooth),
        init_mean,
        init_var,
    )?;
    Ok((params, latents))
}

struct TrialEstimates {
    x_hat: DMatrix<f64>,
    post: StatePosterior,
    q_coef: CoefficientPosterior,
    q_gamma: GammaPosterior,
}

fn initial_trial_estimates(x_hat: DMatrix<f64>, config: &FitConfig) -> Result<TrialEstimates> {
    let t_len = x_hat.nrows();
    let k = config.n_ops;
    let post = StatePosterior::point(x_hat.clone(), DMatrix::zeros(t_len, x_hat.ncols()))?;
    let q_coef = CoefficientPosterior::new(
        DMatrix::zeros(t_len, k),
        DMatrix::from_element(t_len, k, 1.0),
        config.eta,
    )?;
    let shape = config.xi + config.n_samples as f64 / 2.0;
    let q_gamma = GammaPosterior::new(
        DMatrix::from_element(t_len, k, shape),
        DMatrix::from_element(t_len, k, BETA_FLOOR),
    )?;
    Ok(TrialEstimates { x_hat, post, q_coef, q_gamma })
}

fn shift_rows_down(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::zeros(m.nrows(), m.ncols());
    for t in 1..m.nrows() {
        for j in 0..m.ncols() {
            out[(t, j)] = m[(t - 1, j)];
        }
    }
    out
}

fn e_step(
    params: &ModelParameters,
    obs: &DMatrix<f64>,
    prev: &TrialEstimates,
    config: &FitConfig,
    iter: usize,
    trial_idx: usize,
) -> Result<TrialEstimates> {
    let t_len = obs.nrows();
    let k = config.n_ops;
    let window = config.window.resolve(t_len);
    let offsets = estimate_offsets(&prev.x_hat, window)?;

    let mut rng = derive_rng(config.seed, &[streams::COEF_SAMPLE, iter as u64, trial_idx as u64]);
    let coef_plug = match config.state_coef_source {
        CoefSource::Sample => prev.q_coef.sample(&mut rng).0,
        CoefSource::Mean => prev.q_coef.means.clone(),
    };
    let lds = build_tv_lds(params, &coef_plug, &offsets)?;
    let post = kalman_smooth(&lds, obs)?;
    let l_hat = &post.smooth_mean;

    // Per-step sparse initialization. The parallel sweep conditions every
    // step on last iteration's coefficients; the sequential sweep threads the
    // fresh estimates.
    let mut means = DMatrix::<f64>::zeros(t_len, k);
    let mut gamma_sbl = DMatrix::<f64>::zeros(t_len, k);
    let mut coef_var = DMatrix::<f64>::zeros(t_len, k);
    for t in 0..t_len - 1 {
        let prev_coefs = if t == 0 {
            DVector::zeros(k)
        } else {
            match config.sbl_sweep {
                SblSweep::Parallel => prev.q_coef.means.row(t - 1).transpose(),
                SblSweep::Sequential => means.row(t - 1).transpose(),
            }
        };
        let l_t = l_hat.row(t).transpose();
        let mut design = DMatrix::<f64>::zeros(params.n_latent(), k);
        for j in 0..k {
            design.column_mut(j).copy_from(&(&params.dynamic_operators[j] * &l_t));
        }
        let problem = SparseRegressionProblem {
            design,
            target: l_hat.row(t + 1).transpose() - l_t,
            noise_var: params.state_noise_var.clone(),
            prev_coefs,
            xi: config.xi,
        };
        let res = sbl_df_init(&problem, config.sbl_max_iter, config.sbl_tol)?;
        means.row_mut(t).copy_from(&res.coef_mean.transpose());
        gamma_sbl.row_mut(t).copy_from(&res.gamma.transpose());
        coef_var.row_mut(t).copy_from(&res.coef_var.transpose());
    }
    // The last step drives no transition; it is seeded from its predecessor
    // and settles through the smoothness prior during refinement.
    if t_len >= 2 {
        let prev_row = means.row(t_len - 2).into_owned();
        means.row_mut(t_len - 1).copy_from(&prev_row);
        let prev_gamma = gamma_sbl.row(t_len - 2).into_owned();
        gamma_sbl.row_mut(t_len - 1).copy_from(&prev_gamma);
        let prev_var = coef_var.row(t_len - 2).into_owned();
        coef_var.row_mut(t_len - 1).copy_from(&prev_var);
    }
    for g in gamma_sbl.iter_mut() {
        *g = g.max(GAMMA_FLOOR);
    }
    for v in coef_var.iter_mut() {
        *v = v.max(1e-12);
    }

    let (mask, canonical) = support_mask(&means, config.eta);
    let refined = refine_coefs_sgd(
        params,
        l_hat,
        &canonical,
        &gamma_sbl,
        &mask,
        config.xi,
        config.sgd_step,
        config.sgd_iters,
    )?;

    // Variance posterior from the expected residual; the single-draw version
    // has a heavy left tail in the scale parameter.
    let (post_mask, _) = support_mask(&refined, config.eta);
    let prev_shift = shift_rows_down(&refined);
    let q_gamma = update_gamma_expected(config.xi, &prev_shift, &coef_var, &post_mask, config.n_samples)?;
    // q(c) carries the regression posterior variance; using the hyperprior
    // scale there makes the bound loose and the stochastic loop unstable.
    let q_coef = CoefficientPosterior::new(refined, coef_var, config.eta)?;

    Ok(TrialEstimates {
        x_hat: post.reconstructed_state.clone(),
        post,
        q_coef,
        q_gamma,
    })
}

// ---------------------------------------------------------------------------
// M-step: flat parameterization, objective, gradient, Adam ascent.
// ---------------------------------------------------------------------------

/// Values plugged into the parameter objective: point estimates plus the
/// optional posterior second moments. With the moments present the objective
/// is the exact expectation of the Gaussian factors under the posterior;
/// without them it reduces to the plain point plug-in.
#[derive(Debug, Clone)]
pub struct MStepPlugin {
    /// Fast latent point values, T x N.
    pub latents: DMatrix<f64>,
    /// Offsets, T x N.
    pub offsets: DMatrix<f64>,
    /// Coefficient point values, T x K.
    pub coefs: DMatrix<f64>,
    /// Smoothed latent covariances, one per step.
    pub state_cov: Option<Vec<DMatrix<f64>>>,
    /// Lag-one latent cross covariances, length T - 1.
    pub state_pair_cov: Option<Vec<DMatrix<f64>>>,
    /// Coefficient posterior variances (zero for inactive entries), T x K.
    pub coef_var: Option<DMatrix<f64>>,
}

impl MStepPlugin {
    /// A plain point plug-in without posterior moments.
    pub fn point(latents: DMatrix<f64>, offsets: DMatrix<f64>, coefs: DMatrix<f64>) -> Self {
        MStepPlugin { latents, offsets, coefs, state_cov: None, state_pair_cov: None, coef_var: None }
    }
}

/// Flattens the learnable parameters: operators, observation map, offset,
/// then log noise variances (observation, state, coefficient).
pub fn pack_params(params: &ModelParameters) -> Vec<f64> {
    let mut flat = Vec::new();
    for f in &params.dynamic_operators {
        flat.extend(f.transpose().iter().copied()); // row-major
    }
    flat.extend(params.obs_matrix.transpose().iter().copied());
    flat.extend(params.obs_offset.iter().copied());
    flat.extend(params.obs_noise_var.iter().map(|v| v.ln()));
    flat.extend(params.state_noise_var.iter().map(|v| v.ln()));
    flat.extend(params.coef_smooth_var.iter().map(|v| v.ln()));
    flat
}

/// Rebuilds parameters from the flat vector, keeping the initial-state prior
/// of `template` (it is not learned).
pub fn unpack_params(template: &ModelParameters, flat: &[f64]) -> ModelParameters {
    let n = template.n_latent();
    let m = template.n_obs();
    let k = template.n_operators();
    let mut pos = 0;
    let mut take = |len: usize| {
        let s = &flat[pos..pos + len];
        pos += len;
        s
    };
    let operators: Vec<DMatrix<f64>> = (0..k)
        .map(|_| DMatrix::from_row_slice(n, n, take(n * n)))
        .collect();
    let obs_matrix = DMatrix::from_row_slice(m, n, take(m * n));
    let obs_offset = DVector::from_row_slice(take(m));
    let obs_noise_var = DVector::from_iterator(m, take(m).iter().map(|v| v.exp()));
    let state_noise_var = DVector::from_iterator(n, take(n).iter().map(|v| v.exp()));
    let coef_smooth_var = DVector::from_iterator(k, take(k).iter().map(|v| v.exp()));
    ModelParameters {
        dynamic_operators: operators,
        obs_matrix,
        obs_offset,
        obs_noise_var,
        state_noise_var,
        coef_smooth_var,
        init_state_mean: template.init_state_mean.clone(),
        init_state_var: template.init_state_var.clone(),
    }
}

/// Projects each operator block back to unit Frobenius norm. The dictionary
/// scale is not identifiable against the coefficients; pinning it removes a
/// runaway direction of the alternating updates. Zero operators stay zero.
fn project_operators(flat: &mut [f64], params: &ModelParameters) {
    let n = params.n_latent();
    let per_op = n * n;
    for j in 0..params.n_operators() {
        let block = &mut flat[j * per_op..(j + 1) * per_op];
        let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in block.iter_mut() {
                *v /= norm;
            }
        }
    }
}

/// Names the parameter block owning flat index `idx`, for error reports.
fn block_name(params: &ModelParameters, idx: usize) -> String {
    let n = params.n_latent();
    let m = params.n_obs();
    let k = params.n_operators();
    let mut bounds = vec![];
    for j in 0..k {
        bounds.push((n * n, format!("dynamic_operators[{j}]")));
    }
    bounds.push((m * n, "obs_matrix".into()));
    bounds.push((m, "obs_offset".into()));
    bounds.push((m, "obs_noise_var".into()));
    bounds.push((n, "state_noise_var".into()));
    bounds.push((k, "coef_smooth_var".into()));
    let mut acc = 0;
    for (len, name) in bounds {
        acc += len;
        if idx < acc {
            return name;
        }
    }
    "unknown".into()
}

/// Plug-in objective: the expected log density of the parameter-dependent
/// factors, averaged per time step. Posterior second moments, when present in
/// the plugin, contribute their exact trace terms.
pub fn mstep_objective_on(
    params: &ModelParameters,
    observations: &[&DMatrix<f64>],
    plugins: &[MStepPlugin],
) -> f64 {
    let n = params.n_latent();
    let m = params.n_obs();
    let k = params.n_operators();
    let mut total = 0.0;
    let mut norm = 0usize;
    for (obs, plug) in observations.iter().zip(plugins) {
        let t_len = plug.latents.nrows();
        norm += t_len;
        for t in 0..t_len {
            let x_t = plug.latents.row(t).transpose() + plug.offsets.row(t).transpose();
            let mean = &params.obs_matrix * x_t + &params.obs_offset;
            total += crate::linalg::log_normal_diag(&obs.row(t).transpose(), &mean, &params.obs_noise_var);
            if let Some(covs) = &plug.state_cov {
                // E[(y - Dx - d)^2]_i picks up (D Sigma_t D^T)_ii.
                let dsd = &params.obs_matrix * &covs[t] * params.obs_matrix.transpose();
                for i in 0..m {
                    total -= 0.5 * dsd[(i, i)] / params.obs_noise_var[i];
                }
            }
        }
        for t in 0..t_len - 1 {
            let l_t = plug.latents.row(t).transpose();
            let f = crate::model::compose_transition(params, &plug.coefs.row(t).transpose()).expect("dims");
            let a_t = DMatrix::<f64>::identity(n, n) + &f;
            let mean = &a_t * &l_t;
            total += crate::linalg::log_normal_diag(&plug.latents.row(t + 1).transpose(), &mean, &params.state_noise_var);
            if let (Some(covs), Some(pairs)) = (&plug.state_cov, &plug.state_pair_cov) {
                // E[(l_{t+1} - A l_t)(..)^T] adds
                // Sigma_{t+1} + A Sigma_t A^T - A P_t - P_t^T A^T.
                let cross = &a_t * &pairs[t];
                let s = &covs[t + 1] + &a_t * &covs[t] * a_t.transpose() - &cross - cross.transpose();
                for i in 0..n {
                    total -= 0.5 * s[(i, i)] / params.state_noise_var[i];
                }
            }
            for j in 0..k {
                total += crate::linalg::log_normal_scalar(
                    plug.coefs[(t + 1, j)],
                    plug.coefs[(t, j)],
                    params.coef_smooth_var[j],
                );
                if let Some(cv) = &plug.coef_var {
                    total -= 0.5 * (cv[(t + 1, j)] + cv[(t, j)]) / params.coef_smooth_var[j];
                }
            }
        }
    }
    total / norm.max(1) as f64
}

/// Analytic gradient of [`mstep_objective_on`] in the flat layout.
pub fn mstep_gradient_on(
    params: &ModelParameters,
    observations: &[&DMatrix<f64>],
    plugins: &[MStepPlugin],
) -> Vec<f64> {
    let n = params.n_latent();
    let m = params.n_obs();
    let k = params.n_operators();
    let mut g_ops = vec![DMatrix::<f64>::zeros(n, n); k];
    let mut g_obs_matrix = DMatrix::<f64>::zeros(m, n);
    let mut g_obs_offset = DVector::<f64>::zeros(m);
    let mut g_log_obs_var = DVector::<f64>::zeros(m);
    let mut g_log_state_var = DVector::<f64>::zeros(n);
    let mut g_log_coef_var = DVector::<f64>::zeros(k);
    let mut norm = 0usize;

    for (obs, plug) in observations.iter().zip(plugins) {
        let t_len = plug.latents.nrows();
        norm += t_len;
        for t in 0..t_len {
            let x_t = plug.latents.row(t).transpose() + plug.offsets.row(t).transpose();
            let resid = obs.row(t).transpose() - &params.obs_matrix * &x_t - &params.obs_offset;
            for i in 0..m {
                let w = resid[i] / params.obs_noise_var[i];
                g_obs_offset[i] += w;
                for j in 0..n {
                    g_obs_matrix[(i, j)] += w * x_t[j];
                }
                g_log_obs_var[i] += 0.5 * (resid[i] * resid[i] / params.obs_noise_var[i] - 1.0);
            }
            if let Some(covs) = &plug.state_cov {
                let dcov = &params.obs_matrix * &covs[t];
                let dsd = &dcov * params.obs_matrix.transpose();
                for i in 0..m {
                    g_log_obs_var[i] += 0.5 * dsd[(i, i)] / params.obs_noise_var[i];
                    for j in 0..n {
                        g_obs_matrix[(i, j)] -= dcov[(i, j)] / params.obs_noise_var[i];
                    }
                }
            }
        }
        for t in 0..t_len - 1 {
            let l_t = plug.latents.row(t).transpose();
            let f = crate::model::compose_transition(params, &plug.coefs.row(t).transpose()).expect("dims");
            let a_t = DMatrix::<f64>::identity(n, n) + &f;
            let resid = plug.latents.row(t + 1).transpose() - &a_t * &l_t;
            for i in 0..n {
                let w = resid[i] / params.state_noise_var[i];
                for j in 0..n {
                    let base = w * l_t[j];
                    for (op_grad, coefs_row) in g_ops.iter_mut().zip(0..k) {
                        let c = plug.coefs[(t, coefs_row)];
                        if c != 0.0 {
                            op_grad[(i, j)] += c * base;
                        }
                    }
                }
                g_log_state_var[i] += 0.5 * (resid[i] * resid[i] / params.state_noise_var[i] - 1.0);
            }
            if let (Some(covs), Some(pairs)) = (&plug.state_cov, &plug.state_pair_cov) {
                let cross = &a_t * &pairs[t];
                let s = &covs[t + 1] + &a_t * &covs[t] * a_t.transpose() - &cross - cross.transpose();
                for i in 0..n {
                    g_log_state_var[i] += 0.5 * s[(i, i)] / params.state_noise_var[i];
                }
                // d/dA of -1/2 tr(Sx^-1 [A S A^T - A P - P^T A^T]) is
                // -Sx^-1 (A S - P^T).
                let da = &a_t * &covs[t] - pairs[t].transpose();
                for i in 0..n {
                    let w = 1.0 / params.state_noise_var[i];
                    for j in 0..n {
                        for (op_grad, coefs_row) in g_ops.iter_mut().zip(0..k) {
                            let c = plug.coefs[(t, coefs_row)];
                            if c != 0.0 {
                                op_grad[(i, j)] -= c * w * da[(i, j)];
                            }
                        }
                    }
                }
            }
            for j in 0..k {
                let d = plug.coefs[(t + 1, j)] - plug.coefs[(t, j)];
                g_log_coef_var[j] += 0.5 * (d * d / params.coef_smooth_var[j] - 1.0);
                if let Some(cv) = &plug.coef_var {
                    g_log_coef_var[j] += 0.5 * (cv[(t + 1, j)] + cv[(t, j)]) / params.coef_smooth_var[j];
                }
            }
        }
    }

    let scale = 1.0 / norm.max(1) as f64;
    let mut flat = Vec::new();
    for op in &g_ops {
        flat.extend(op.transpose().iter().map(|v| v * scale));
    }
    flat.extend(g_obs_matrix.transpose().iter().map(|v| v * scale));
    flat.extend(g_obs_offset.iter().map(|v| v * scale));
    flat.extend(g_log_obs_var.iter().map(|v| v * scale));
    flat.extend(g_log_state_var.iter().map(|v| v * scale));
    flat.extend(g_log_coef_var.iter().map(|v| v * scale));
    flat
}

fn build_plugins(
    q_state: &[StatePosterior],
    q_coef: &[CoefficientPosterior],
    config: &FitConfig,
) -> Result<Vec<Vec<MStepPlugin>>> {
    let mut out = Vec::with_capacity(q_state.len());
    for (ti, (post, qc)) in q_state.iter().zip(q_coef).enumerate() {
        if config.n_samples == 1 {
            // Posterior means plus the exact second-moment corrections.
            let coef_var = DMatrix::from_fn(qc.variances.nrows(), qc.variances.ncols(), |i, j| {
                if qc.active_mask[(i, j)] {
                    qc.variances[(i, j)]
                } else {
                    0.0
                }
            });
            out.push(vec![MStepPlugin {
                latents: post.smooth_mean.clone(),
                offsets: post.offsets.clone(),
                coefs: qc.means.clone(),
                state_cov: Some(post.smooth_var.clone()),
                state_pair_cov: Some(post.pair_cov.clone()),
                coef_var: Some(coef_var),
            }]);
        } else {
            let mut sets = Vec::with_capacity(config.n_samples);
            for draw in 0..config.n_samples {
                let mut rng = derive_rng(config.seed, &[streams::MSTEP, ti as u64, draw as u64]);
                let (l, _) = post.sample_joint(&mut rng)?;
                let (c, _) = qc.sample(&mut rng);
                sets.push(MStepPlugin::point(l, post.offsets.clone(), c));
            }
            out.push(sets);
        }
    }
    Ok(out)
}

/// Gradient ascent (Adam) on the plug-in parameter objective. Noise variances
/// are optimized in log space and floored at [`VARIANCE_FLOOR`].
pub fn m_step(
    params: &ModelParameters,
    data: &Dataset,
    q_state: &[StatePosterior],
    q_coef: &[CoefficientPosterior],
    q_gamma: &[GammaPosterior],
    config: &FitConfig,
) -> Result<ModelParameters> {
    m_step_impl(params, data, q_state, q_coef, q_gamma, config, false)
}

fn m_step_impl(
    params: &ModelParameters,
    data: &Dataset,
    q_state: &[StatePosterior],
    q_coef: &[CoefficientPosterior],
    _q_gamma: &[GammaPosterior],
    config: &FitConfig,
    freeze_variances: bool,
) -> Result<ModelParameters> {
    let plugin_sets = build_plugins(q_state, q_coef, config)?;
    let observations: Vec<&DMatrix<f64>> = data.trials.iter().map(|tr| &tr.obs).collect();
    let n_sets = plugin_sets.first().map_or(1, |p| p.len().max(1));

    let averaged_objective = |p: &ModelParameters| -> f64 {
        (0..n_sets)
            .map(|s| {
                let set: Vec<MStepPlugin> = plugin_sets.iter().map(|pl| pl[s].clone()).collect();
                mstep_objective_on(p, &observations, &set)
            })
            .sum::<f64>()
            / n_sets as f64
    };

    let start = pack_params(params);
    let start_objective = averaged_objective(params);
    let dim = start.len();
    let var_start = dim - (params.n_obs() + params.n_latent() + params.n_operators());
    // Variance floor above the hard minimum: a collapsed smoothness variance
    // makes the coefficient refinement infinitely stiff.
    let log_floor = (VARIANCE_FLOOR * 100.0).ln();
    let log_ceil = 1e12f64.ln();

    // Adam ascent; if a pass fails to improve the plug-in objective (it can
    // overshoot early, when the noise variances are still provisional), retry
    // from the start with a halved step. Near a stationary point the pass is
    // allowed to wiggle within a small tolerance.
    let accept_floor = start_objective - 1e-7 * (1.0 + start_objective.abs());
    let mut step = config.mstep_step;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _attempt in 0..4 {
        let mut flat = start.clone();
        let (mut m1, mut m2) = (vec![0.0; dim], vec![0.0; dim]);
        let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
        for it in 0..config.mstep_iters {
            let current = unpack_params(params, &flat);
            let mut grad = vec![0.0; dim];
            for s in 0..n_sets {
                let set: Vec<MStepPlugin> = plugin_sets.iter().map(|p| p[s].clone()).collect();
                let g = mstep_gradient_on(&current, &observations, &set);
                for i in 0..dim {
                    grad[i] += g[i] / n_sets as f64;
                }
            }
            for (i, g) in grad.iter().enumerate() {
                if !g.is_finite() {
                    return Err(PdldsError::NonFiniteGradient {
                        context: "m_step".to_string(),
                        location: block_name(params, i),
                    });
                }
            }
            if freeze_variances {
                for g in grad.iter_mut().skip(var_start) {
                    *g = 0.0;
                }
            }
            let t = (it + 1) as f64;
            for i in 0..dim {
                m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
                m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m1[i] / (1.0 - beta1.powf(t));
                let v_hat = m2[i] / (1.0 - beta2.powf(t));
                flat[i] += step * m_hat / (v_hat.sqrt() + eps);
                if i >= var_start {
                    flat[i] = flat[i].clamp(log_floor, log_ceil);
                }
            }
            project_operators(&mut flat, params);
        }
        let candidate = unpack_params(params, &flat);
        let value = averaged_objective(&candidate);
        if value.is_finite() && value >= accept_floor {
            best = Some((value, flat));
            break;
        }
        if best.as_ref().map_or(true, |(b, _)| value.is_finite() && value > *b) {
            best = Some((value, flat));
        }
        step *= 0.5;
    }
    let (value, flat) = best.expect("at least one attempt recorded");
    // Do not materially degrade the plug-in objective: fall back to the
    // incoming parameters if every attempt lost ground.
    let updated = if value >= accept_floor {
        unpack_params(params, &flat)
    } else {
        params.clone()
    };
    updated.validate()?;
    Ok(updated)
}

// ---------------------------------------------------------------------------
// Outer loop.
// ---------------------------------------------------------------------------

fn evaluate_elbo(
    params: &ModelParameters,
    data: &Dataset,
    trials: &[TrialEstimates],
    config: &FitConfig,
) -> Result<(f64, f64)> {
    let per_trial: Vec<Result<crate::model::ElboEstimate>> = data
        .trials
        .par_iter()
        .zip(trials.par_iter())
        .enumerate()
        .map(|(ti, (tr, est))| {
            // Common random numbers across outer iterations: the seed depends
            // on the trial, not the iteration.
            let seed = mix(config.seed, &[streams::ELBO, ti as u64]);
            elbo(params, &est.post, &est.q_coef, &est.q_gamma, &tr.obs, config.xi, config.n_samples, seed)
        })
        .collect();
    let mut value = 0.0;
    let mut var = 0.0;
    for r in per_trial {
        let e = r?;
        value += e.value;
        var += e.std_error * e.std_error;
    }
    let se = if config.n_samples > 1 { var.sqrt() } else { f64::NAN };
    Ok((value, se))
}

fn converged(trace: &[f64], tol: f64) -> bool {
    if trace.len() < 4 {
        return false;
    }
    let last = &trace[trace.len() - 4..];
    last.windows(2)
        .all(|w| (w[1] - w[0]).abs() < tol * w[0].abs().max(1e-12))
}

fn run_em(
    mut params: ModelParameters,
    data: &Dataset,
    config: &FitConfig,
    init_latents: Vec<DMatrix<f64>>,
    learn_parameters: bool,
) -> Result<FitResult> {
    let mut trials: Vec<TrialEstimates> = init_latents
        .into_iter()
        .map(|x| initial_trial_estimates(x, config))
        .collect::<Result<_>>()?;

    let mut elbo_trace = Vec::new();
    let mut elbo_se_trace = Vec::new();
    let mut is_converged = false;
    let mut iterations_run = 0;

    for iter in 0..config.max_outer_iters {
        let stepped: Vec<Result<TrialEstimates>> = data
            .trials
            .par_iter()
            .zip(trials.par_iter())
            .enumerate()
            .map(|(ti, (tr, est))| e_step(&params, &tr.obs, est, config, iter, ti))
            .collect();
        let mut next = Vec::with_capacity(stepped.len());
        for r in stepped {
            next.push(r.map_err(|e| e.in_stage("e_step", iter))?);
        }
        trials = next;

        if learn_parameters {
            let q_state: Vec<StatePosterior> = trials.iter().map(|t| t.post.clone()).collect();
            let q_coef: Vec<CoefficientPosterior> = trials.iter().map(|t| t.q_coef.clone()).collect();
            let q_gamma: Vec<GammaPosterior> = trials.iter().map(|t| t.q_gamma.clone()).collect();
            let freeze = iter < config.mstep_variance_warmup;
            params = m_step_impl(&params, data, &q_state, &q_coef, &q_gamma, config, freeze)
                .map_err(|e| e.in_stage("m_step", iter))?;
        }

        let (value, se) = evaluate_elbo(&params, data, &trials, config).map_err(|e| e.in_stage("elbo", iter))?;
        elbo_trace.push(value);
        elbo_se_trace.push(se);
        iterations_run = iter + 1;

        if converged(&elbo_trace, config.elbo_tol) {
            is_converged = true;
            break;
        }
    }

    Ok(FitResult {
        params,
        q_state: trials.iter().map(|t| t.post.clone()).collect(),
        q_coef: trials.iter().map(|t| t.q_coef.clone()).collect(),
        q_gamma: trials.iter().map(|t| t.q_gamma.clone()).collect(),
        elbo_trace,
        elbo_se_trace,
        converged: is_converged,
        iterations_run,
    })
}

/// Runs the full variational EM loop on `data`.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(PdldsError::value("fit", "empty dataset"));
    }
    let (params, latents) = initialize(data, config)?;
    run_em(params, data, config, latents, true)
}

/// Re-estimates latent variables on new trials with frozen parameters: the
/// coordinate-ascent loop without the parameter update.
pub fn infer_on_heldout(params: &ModelParameters, data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if data.is_empty() {
        return Ok(FitResult {
            params: params.clone(),
            q_state: vec![],
            q_coef: vec![],
            q_gamma: vec![],
            elbo_trace: vec![],
            elbo_se_trace: vec![],
            converged: true,
            iterations_run: 0,
        });
    }
    let m = data.obs_dim().unwrap();
    if m != params.n_obs() {
        return Err(PdldsError::dims("infer_on_heldout", params.n_obs(), m));
    }
    if config.n_latent != params.n_latent() || config.n_ops != params.n_operators() {
        return Err(PdldsError::dims(
            "infer_on_heldout config",
            format!("N={}, K={}", params.n_latent(), params.n_operators()),
            format!("N={}, K={}", config.n_latent, config.n_ops),
        ));
    }
    // Project observations through the frozen map: x = D^+ (y - d).
    let pinv = params
        .obs_matrix
        .clone()
        .svd(true, true)
        .pseudo_inverse(1e-12)
        .map_err(|e| PdldsError::value("infer_on_heldout", e))?;
    let latents: Vec<DMatrix<f64>> = data
        .trials
        .iter()
        .map(|tr| {
            let mut x = DMatrix::<f64>::zeros(tr.obs.nrows(), params.n_latent());
            for t in 0..tr.obs.nrows() {
                let proj = &pinv * (tr.obs.row(t).transpose() - &params.obs_offset);
                x.row_mut(t).copy_from(&proj.transpose());
            }
            x
        })
        .collect();
    run_em(params.clone(), data, config, latents, false)
}
