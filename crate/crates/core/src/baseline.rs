//! Point-estimate baseline: sequential basis-pursuit inference with dynamic
//! filtering and alternating least-squares dictionary learning.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PdldsError, Result};
use crate::linalg::solve_spd;
use crate::model::{compose_transition, Dataset, ModelParameters};

/// Penalty weights and solver limits of the per-step objective
/// `||y - D x||^2 + l0 ||x - x_prev - F x_prev||^2 + l1 ||c||_1 + l2 ||c - c_prev||^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BpdnDfConfig {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub solver_iters: usize,
    pub solver_tol: f64,
}

impl BpdnDfConfig {
    pub fn new(lambda0: f64, lambda1: f64, lambda2: f64) -> Self {
        BpdnDfConfig { lambda0, lambda1, lambda2, solver_iters: 400, solver_tol: 1e-9 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda0 < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(PdldsError::InvalidConfig("lambdas must be nonnegative".into()));
        }
        if self.solver_iters < 1 || !(self.solver_tol > 0.0) {
            return Err(PdldsError::InvalidConfig("solver_iters >= 1 and solver_tol > 0 required".into()));
        }
        Ok(())
    }
}

/// One solved step of the sequential objective.
#[derive(Debug, Clone)]
pub struct BpdnStepResult {
    pub state: DVector<f64>,
    pub coefs: DVector<f64>,
    /// False when the alternation hit `solver_iters` without settling.
    pub converged: bool,
}

/// Value of the per-step objective at `(x, c)` given the previous estimates.
pub fn bpdn_step_objective(
    params: &ModelParameters,
    y_t: &DVector<f64>,
    x_prev: &DVector<f64>,
    c_prev: &DVector<f64>,
    x: &DVector<f64>,
    c: &DVector<f64>,
    config: &BpdnDfConfig,
) -> f64 {
    let y_eff = y_t - &params.obs_offset;
    let obs = (&y_eff - &params.obs_matrix * x).norm_squared();
    let f = compose_transition(params, c).expect("dims");
    let drift = (x - x_prev - f * x_prev).norm_squared();
    let l1: f64 = c.iter().map(|v| v.abs()).sum();
    let smooth = (c - c_prev).norm_squared();
    obs + config.lambda0 * drift + config.lambda1 * l1 + config.lambda2 * smooth
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Alternating minimization of one step: the state subproblem in closed form,
/// the coefficient subproblem by proximal gradient with backtracking.
pub fn bpdn_df_step(
    params: &ModelParameters,
    y_t: &DVector<f64>,
    x_prev: &DVector<f64>,
    c_prev: &DVector<f64>,
    config: &BpdnDfConfig,
) -> Result<BpdnStepResult> {
    config.validate()?;
    let n = params.n_latent();
    let k = params.n_operators();
    if y_t.len() != params.n_obs() || x_prev.len() != n || c_prev.len() != k {
        return Err(PdldsError::dims("bpdn_df_step", format!("M={}, N={n}, K={k}", params.n_obs()), y_t.len()));
    }
    if x_prev.iter().chain(c_prev.iter()).any(|v| !v.is_finite()) {
        return Err(PdldsError::value("bpdn_df_step", "non-finite previous estimates"));
    }
    let y_eff = y_t - &params.obs_offset;
    let d = &params.obs_matrix;
    // Design of the coefficient subproblem: column k is f_k x_prev.
    let mut phi = DMatrix::<f64>::zeros(n, k);
    for j in 0..k {
        phi.column_mut(j).copy_from(&(&params.dynamic_operators[j] * x_prev));
    }
    // State normal equations matrix is constant across the alternation.
    let mut a = d.transpose() * d;
    for i in 0..n {
        a[(i, i)] += config.lambda0;
    }

    let mut c = c_prev.clone();
    let mut x = x_prev.clone();
    let phi_gram = phi.transpose() * &phi;
    let lipschitz = 2.0 * (config.lambda0 * phi_gram.norm() + config.lambda2) + 1e-12;
    let mut converged = false;
    for _ in 0..config.solver_iters {
        // x given c: (D^T D + l0 I) x = D^T y + l0 (x_prev + Phi c).
        let rhs = d.transpose() * &y_eff + (x_prev + &phi * &c) * config.lambda0;
        let x_new = solve_spd(&a, &DMatrix::from_column_slice(n, 1, rhs.as_slice()), 1e-12, "bpdn x-subproblem")?
            .column(0)
            .into_owned();

        // c given x: proximal gradient on the smooth part with backtracking.
        let mut c_new = c.clone();
        let target = &x_new - x_prev;
        let smooth_grad = |cc: &DVector<f64>| -> DVector<f64> {
            phi.transpose() * (&phi * cc - &target) * (2.0 * config.lambda0) + (cc - c_prev) * (2.0 * config.lambda2)
        };
        let smooth_val = |cc: &DVector<f64>| -> f64 {
            config.lambda0 * (&target - &phi * cc).norm_squared() + config.lambda2 * (cc - c_prev).norm_squared()
        };
        let mut step = 1.0 / lipschitz.max(1e-12);
        for _ in 0..config.solver_iters {
            let g = smooth_grad(&c_new);
            let mut proposal = DVector::<f64>::zeros(k);
            let base = smooth_val(&c_new);
            let mut accepted = false;
            for _ in 0..60 {
                for j in 0..k {
                    proposal[j] = soft_threshold(c_new[j] - step * g[j], config.lambda1 * step);
                }
                let diff = &proposal - &c_new;
                // Standard majorization test for the proximal step.
                if smooth_val(&proposal) <= base + g.dot(&diff) + diff.norm_squared() / (2.0 * step) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            let delta = (&proposal - &c_new).abs().max();
            c_new = proposal;
            if delta < config.solver_tol {
                break;
            }
        }

        let delta = (&x_new - &x).abs().max().max((&c_new - &c).abs().max());
        x = x_new;
        c = c_new;
        if delta < config.solver_tol {
            converged = true;
            break;
        }
    }
    Ok(BpdnStepResult { state: x, coefs: c, converged })
}

/// Point estimates for one trial, solved forward in time by threading the
/// previous step's estimates.
#[derive(Debug, Clone)]
pub struct BpdnTrajectory {
    pub states: DMatrix<f64>,
    pub coefs: DMatrix<f64>,
    /// Total objective accumulated over steps.
    pub objective: f64,
    pub all_converged: bool,
}

/// Runs [`bpdn_df_step`] sequentially over a trial. The first step uses zero
/// previous state and coefficients.
pub fn bpdn_df_infer(params: &ModelParameters, obs: &DMatrix<f64>, config: &BpdnDfConfig) -> Result<BpdnTrajectory> {
    let t_len = obs.nrows();
    if t_len < 1 {
        return Err(PdldsError::value("bpdn_df_infer", "empty trial"));
    }
    let n = params.n_latent();
    let k = params.n_operators();
    let mut states = DMatrix::<f64>::zeros(t_len, n);
    let mut coefs = DMatrix::<f64>::zeros(t_len, k);
    let mut x_prev = DVector::<f64>::zeros(n);
    let mut c_prev = DVector::<f64>::zeros(k);
    let mut objective = 0.0;
    let mut all_converged = true;
    for t in 0..t_len {
        let y_t = obs.row(t).transpose();
        let step = bpdn_df_step(params, &y_t, &x_prev, &c_prev, config)?;
        objective += bpdn_step_objective(params, &y_t, &x_prev, &c_prev, &step.state, &step.coefs, config);
        all_converged &= step.converged;
        states.row_mut(t).copy_from(&step.state.transpose());
        coefs.row_mut(t).copy_from(&step.coefs.transpose());
        x_prev = step.state;
        c_prev = step.coefs;
    }
    Ok(BpdnTrajectory { states, coefs, objective, all_converged })
}

/// Result of the alternating dictionary-learning loop.
#[derive(Debug, Clone)]
pub struct DldsLearnResult {
    pub params: ModelParameters,
    /// Total inference objective recorded after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// Count of jittered (near-singular) least-squares solves.
    pub warnings: usize,
}

/// Alternates sequential inference with least-squares updates of the
/// operator dictionary and the observation map.
pub fn dlds_learn(
    data: &Dataset,
    n_ops: usize,
    n_latent: usize,
    config: &BpdnDfConfig,
    outer_iters: usize,
    seed: u64,
) -> Result<DldsLearnResult> {
    config.validate()?;
    if outer_iters < 1 {
        return Err(PdldsError::InvalidConfig("outer_iters must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(PdldsError::value("dlds_learn", "empty dataset"));
    }
    // Shared PCA-style initialization, with a small random dictionary.
    let mut fit_config = crate::learning::FitConfig::defaults(n_ops, n_latent);
    fit_config.seed = seed;
    let (mut params, _) = crate::learning::initialize(data, &fit_config)?;

    let mut objective_trace = Vec::with_capacity(outer_iters);
    let mut warnings = 0usize;
    for _ in 0..outer_iters {
        let inferred: Vec<Result<BpdnTrajectory>> = data
            .trials
            .par_iter()
            .map(|tr| bpdn_df_infer(&params, &tr.obs, config))
            .collect();
        let mut trajectories = Vec::with_capacity(inferred.len());
        for r in inferred {
            trajectories.push(r?);
        }
        objective_trace.push(trajectories.iter().map(|t| t.objective).sum());

        warnings += update_dictionary(&mut params, &trajectories)?;
        warnings += update_observation_map(&mut params, data, &trajectories)?;
    }
    Ok(DldsLearnResult { params, objective_trace, warnings })
}

/// Least-squares update of the operators: each latent output dimension
/// regresses its increments on the coefficient-scaled state entries.
fn update_dictionary(params: &mut ModelParameters, trajectories: &[BpdnTrajectory]) -> Result<usize> {
    let n = params.n_latent();
    let k = params.n_operators();
    let p = k * n;
    let mut warnings = 0;
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, n);
    for traj in trajectories {
        let t_len = traj.states.nrows();
        for t in 0..t_len.saturating_sub(1) {
            let x_t = traj.states.row(t).transpose();
            // Regressor vector: entries c_{t,j} * x_{t,m} for (j, m).
            let mut reg = DVector::<f64>::zeros(p);
            for j in 0..k {
                for mm in 0..n {
                    reg[j * n + mm] = traj.coefs[(t, j)] * x_t[mm];
                }
            }
            let target = traj.states.row(t + 1).transpose() - &x_t;
            gram += &reg * reg.transpose();
            for i in 0..n {
                for a in 0..p {
                    rhs[(a, i)] += reg[a] * target[i];
                }
            }
        }
    }
    let min_diag = (0..p).map(|i| gram[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_diag < 1e-10 {
        warnings += 1;
    }
    let sol = solve_spd(&gram, &rhs, 1e-8, "dlds dictionary update")?;
    for j in 0..k {
        for i in 0..n {
            for mm in 0..n {
                params.dynamic_operators[j][(i, mm)] = sol[(j * n + mm, i)];
            }
        }
    }
    Ok(warnings)
}

/// Least-squares update of the observation map and offset given states.
fn update_observation_map(
    params: &mut ModelParameters,
    data: &Dataset,
    trajectories: &[BpdnTrajectory],
) -> Result<usize> {
    let n = params.n_latent();
    let m = params.n_obs();
    let p = n + 1;
    let mut warnings = 0;
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, m);
    for (tr, traj) in data.trials.iter().zip(trajectories) {
        for t in 0..tr.obs.nrows() {
            let mut reg = DVector::<f64>::zeros(p);
            for i in 0..n {
                reg[i] = traj.states[(t, i)];
            }
            reg[n] = 1.0;
            gram += &reg * reg.transpose();
            for i in 0..m {
                for a in 0..p {
                    rhs[(a, i)] += reg[a] * tr.obs[(t, i)];
                }
            }
        }
    }
    let min_diag = (0..p).map(|i| gram[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_diag < 1e-10 {
        warnings += 1;
    }
    let sol = solve_spd(&gram, &rhs, 1e-8, "dlds observation update")?;
    for i in 0..m {
        for j in 0..n {
            params.obs_matrix[(i, j)] = sol[(j, i)];
        }
        params.obs_offset[i] = sol[(n, i)];
    }
    Ok(warnings)
}
