//! Evaluation metrics: latent alignment, dynamics/state error, switch-rate
//! error, multi-step inference R^2, and the single-transition ridge
//! diagnostic.

use nalgebra::{DMatrix, DVector};

use crate::error::{PdldsError, Result};
use crate::linalg::solve_spd;
use crate::model::{compose_transition, ModelParameters};

/// Least-squares alignment between estimated and true latents.
#[derive(Debug, Clone)]
pub struct Alignment {
    /// The transform U minimizing sum ||x - U x_hat||^2 across trials.
    pub matrix: DMatrix<f64>,
    /// True when the estimate gram matrix was numerically rank deficient and
    /// the solve relied on jitter.
    pub degenerate: bool,
}

/// Fits the optimal linear transform from estimated to true latents across
/// all trials (normal equations with jitter).
pub fn align_latents(truth: &[DMatrix<f64>], est: &[DMatrix<f64>]) -> Result<Alignment> {
    if truth.len() != est.len() || truth.is_empty() {
        return Err(PdldsError::dims("align_latents", truth.len(), est.len()));
    }
    let n = truth[0].ncols();
    let mut cross = DMatrix::<f64>::zeros(n, n); // sum x xhat^T
    let mut gram = DMatrix::<f64>::zeros(n, n); // sum xhat xhat^T
    for (x, xh) in truth.iter().zip(est) {
        if x.nrows() != xh.nrows() || x.ncols() != n || xh.ncols() != n {
            return Err(PdldsError::dims("align_latents trial", format!("{}x{n}", x.nrows()), format!("{}x{}", xh.nrows(), xh.ncols())));
        }
        cross += x.transpose() * xh;
        gram += xh.transpose() * xh;
    }
    let scale = gram.diagonal().max().max(1e-30);
    let degenerate = gram.diagonal().min() < scale * 1e-12 || gram.clone().cholesky().is_none();
    // U solves U gram = cross, i.e. gram^T U^T = cross^T. Jitter only enters
    // when the plain factorization fails.
    let jitter = if degenerate { scale * 1e-10 } else { 0.0 };
    let u_t = solve_spd(&gram.transpose(), &cross.transpose(), jitter, "align_latents")?;
    Ok(Alignment { matrix: u_t.transpose(), degenerate })
}

/// Mean squared error of first-difference speeds after alignment, averaged
/// over steps then trials.
pub fn mse_dynamics(truth: &[DMatrix<f64>], est: &[DMatrix<f64>], u: &DMatrix<f64>) -> Result<f64> {
    if truth.len() != est.len() || truth.is_empty() {
        return Err(PdldsError::dims("mse_dynamics", truth.len(), est.len()));
    }
    let mut total = 0.0;
    for (x, xh) in truth.iter().zip(est) {
        let t_len = x.nrows();
        if t_len < 2 {
            return Err(PdldsError::value("mse_dynamics", "need T >= 2"));
        }
        let mut acc = 0.0;
        for t in 0..t_len - 1 {
            let dx = x.row(t + 1).transpose() - x.row(t).transpose();
            let dxh = u * (xh.row(t + 1).transpose() - xh.row(t).transpose());
            acc += (dx - dxh).norm_squared();
        }
        total += acc / (t_len - 1) as f64;
    }
    Ok(total / truth.len() as f64)
}

/// Mean squared error of the latent states after alignment.
pub fn mse_state(truth: &[DMatrix<f64>], est: &[DMatrix<f64>], u: &DMatrix<f64>) -> Result<f64> {
    if truth.len() != est.len() || truth.is_empty() {
        return Err(PdldsError::dims("mse_state", truth.len(), est.len()));
    }
    let mut total = 0.0;
    for (x, xh) in truth.iter().zip(est) {
        if x.nrows() != xh.nrows() {
            return Err(PdldsError::dims("mse_state trial", x.nrows(), xh.nrows()));
        }
        let mut acc = 0.0;
        for t in 0..x.nrows() {
            acc += (x.row(t).transpose() - u * xh.row(t).transpose()).norm_squared();
        }
        total += acc / x.nrows() as f64;
    }
    Ok(total / truth.len() as f64)
}

/// How switch events are read off a coefficient trajectory.
#[derive(Debug, Clone, Copy)]
pub enum SwitchMode {
    /// Event when the largest-magnitude operator changes (ties resolve to the
    /// lowest index).
    Dominant,
    /// Event when the set of active operators `{k : |c| > eta}` changes.
    ActiveSet { eta: f64 },
}

fn dominant_index(coefs: &DMatrix<f64>, t: usize) -> usize {
    let mut best = 0;
    let mut best_val = coefs[(t, 0)].abs();
    for j in 1..coefs.ncols() {
        let v = coefs[(t, j)].abs();
        if v > best_val {
            best = j;
            best_val = v;
        }
    }
    best
}

/// Switch events of a coefficient trajectory; index 0 is never an event.
pub fn switch_events_coefs(coefs: &DMatrix<f64>, mode: SwitchMode) -> Vec<bool> {
    let t_len = coefs.nrows();
    let mut events = vec![false; t_len];
    match mode {
        SwitchMode::Dominant => {
            let mut prev = dominant_index(coefs, 0);
            for t in 1..t_len {
                let cur = dominant_index(coefs, t);
                events[t] = cur != prev;
                prev = cur;
            }
        }
        SwitchMode::ActiveSet { eta } => {
            let set_at = |t: usize| -> Vec<bool> {
                (0..coefs.ncols()).map(|j| coefs[(t, j)].abs() > eta).collect()
            };
            let mut prev = set_at(0);
            for t in 1..t_len {
                let cur = set_at(t);
                events[t] = cur != prev;
                prev = cur;
            }
        }
    }
    events
}

/// Switch events of a discrete label sequence.
pub fn switch_events_labels(labels: &[i64]) -> Vec<bool> {
    let mut events = vec![false; labels.len()];
    for t in 1..labels.len() {
        events[t] = labels[t] != labels[t - 1];
    }
    events
}

/// Fraction of steps flagged as events.
pub fn switch_rate(events: &[bool]) -> f64 {
    if events.is_empty() {
        return 0.0;
    }
    events.iter().filter(|e| **e).count() as f64 / events.len() as f64
}

/// Mean squared error between true per-trial switch rates and the rates of
/// the estimated event sequences.
pub fn mse_switch(true_rates: &[f64], est_events: &[Vec<bool>]) -> Result<f64> {
    if true_rates.len() != est_events.len() || true_rates.is_empty() {
        return Err(PdldsError::dims("mse_switch", true_rates.len(), est_events.len()));
    }
    let total: f64 = true_rates
        .iter()
        .zip(est_events)
        .map(|(r, ev)| {
            let rh = switch_rate(ev);
            (r - rh) * (r - rh)
        })
        .sum();
    Ok(total / true_rates.len() as f64)
}

/// Coefficient handling along a multi-step rollout.
#[derive(Debug, Clone, Copy)]
pub enum RolloutCoefs {
    /// Recompose the transition from the coefficients inferred at each rolled
    /// step.
    PerStep,
    /// Pin the coefficients at their origin-time values.
    FrozenAtOrigin,
}

/// Predictions of `y_{t+k}` from every origin t by rolling the composed
/// dynamics on the fast latent, holding offsets at their inferred values.
/// Row t of the output is the prediction targeting step `t + k`.
pub fn multistep_predictions(
    params: &ModelParameters,
    latents: &DMatrix<f64>,
    offsets: &DMatrix<f64>,
    coefs: &DMatrix<f64>,
    k_steps: usize,
    mode: RolloutCoefs,
) -> Result<DMatrix<f64>> {
    let t_len = latents.nrows();
    if k_steps < 1 || k_steps >= t_len {
        return Err(PdldsError::value("multistep_predictions", format!("need 1 <= k < T, got k={k_steps}, T={t_len}")));
    }
    if offsets.nrows() != t_len || coefs.nrows() != t_len {
        return Err(PdldsError::dims("multistep_predictions", t_len, coefs.nrows()));
    }
    let m = params.n_obs();
    let n_origins = t_len - k_steps;
    let mut preds = DMatrix::<f64>::zeros(n_origins, m);
    for origin in 0..n_origins {
        let mut state = latents.row(origin).transpose();
        for j in 0..k_steps {
            let row = match mode {
                RolloutCoefs::PerStep => origin + j,
                RolloutCoefs::FrozenAtOrigin => origin,
            };
            let f = compose_transition(params, &coefs.row(row).transpose())?;
            state = &state + f * &state;
        }
        let x = state + offsets.row(origin + k_steps).transpose();
        let y = &params.obs_matrix * x + &params.obs_offset;
        preds.row_mut(origin).copy_from(&y.transpose());
    }
    Ok(preds)
}

/// Coefficient of determination of k-step predictions against the trial's
/// observations, with the per-trajectory mean as the baseline predictor.
pub fn r2_of_predictions(obs: &DMatrix<f64>, preds: &DMatrix<f64>, k_steps: usize) -> Result<f64> {
    let t_len = obs.nrows();
    if k_steps < 1 || k_steps >= t_len {
        return Err(PdldsError::value("r2_of_predictions", format!("need 1 <= k < T, got k={k_steps}, T={t_len}")));
    }
    if preds.nrows() != t_len - k_steps || preds.ncols() != obs.ncols() {
        return Err(PdldsError::dims("r2_of_predictions", format!("{}x{}", t_len - k_steps, obs.ncols()), format!("{}x{}", preds.nrows(), preds.ncols())));
    }
    let mean = obs.row_sum() / t_len as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for origin in 0..t_len - k_steps {
        let target = obs.row(origin + k_steps);
        num += (target - preds.row(origin)).norm_squared();
        den += (target - mean.clone()).norm_squared();
    }
    if den == 0.0 {
        return Err(PdldsError::value("r2_of_predictions", "constant observations"));
    }
    Ok(1.0 - num / den)
}

/// Multi-step inference score for one trial: roll the inferred dynamics
/// `k_steps` forward from every origin and compare against the observations.
pub fn multistep_r2(
    params: &ModelParameters,
    latents: &DMatrix<f64>,
    offsets: &DMatrix<f64>,
    coefs: &DMatrix<f64>,
    obs: &DMatrix<f64>,
    k_steps: usize,
    mode: RolloutCoefs,
) -> Result<f64> {
    let preds = multistep_predictions(params, latents, offsets, coefs, k_steps, mode)?;
    r2_of_predictions(obs, &preds, k_steps)
}

/// Ridge fit of a dynamics matrix and offset to a single transition. With one
/// sample the centered design vanishes: the penalty drives the matrix to zero
/// and the offset absorbs the whole increment.
pub fn ridge_transition_fit(x_t: &DVector<f64>, x_next: &DVector<f64>, lambda: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if x_t.len() != x_next.len() {
        return Err(PdldsError::dims("ridge_transition_fit", x_t.len(), x_next.len()));
    }
    if !(lambda > 0.0) {
        return Err(PdldsError::value("ridge_transition_fit", "lambda must be positive"));
    }
    let n = x_t.len();
    let resid = x_next - x_t;
    // Ridge with an unpenalized intercept: center the (single-sample) data,
    // solve for the matrix, then back out the intercept.
    let x_mean = x_t.clone();
    let r_mean = resid.clone();
    let x_centered = x_t - &x_mean;
    let r_centered = &resid - &r_mean;
    let mut gram = &x_centered * x_centered.transpose();
    for i in 0..n {
        gram[(i, i)] += lambda;
    }
    let rhs = &x_centered * r_centered.transpose();
    let f = solve_spd(&gram, &rhs, 0.0, "ridge_transition_fit")?.transpose();
    let b = &r_mean - &f * &x_mean;
    Ok((f, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
        }};
    }

    fn random_latents(t_len: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = derive_rng(seed, &[80]);
        DMatrix::from_fn(t_len, n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn align_identity_when_est_equals_truth() {
        let x = random_latents(40, 3, 1);
        let out = align_latents(&[x.clone()], &[x.clone()]).unwrap();
        assert!((out.matrix - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-10);
        assert!(!out.degenerate);
    }

    #[test]
    fn align_inverts_known_rotation() {
        let theta: f64 = 0.6;
        let r = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let x = random_latents(60, 2, 2);
        let est = &x * r.transpose(); // rows are (R x_t)^T
        let out = align_latents(&[x.clone()], &[est]).unwrap();
        let r_inv = r.try_inverse().unwrap();
        assert!((out.matrix - r_inv).abs().max() < 1e-8);
    }

    #[test]
    fn align_halves_doubled_estimate() {
        let x = random_latents(30, 2, 3);
        let out = align_latents(&[x.clone()], &[&x * 2.0]).unwrap();
        assert!((out.matrix - DMatrix::<f64>::identity(2, 2) * 0.5).abs().max() < 1e-10);
    }

    #[test]
    fn align_recovers_general_invertible_distortion() {
        let a = DMatrix::from_row_slice(3, 3, &[1.2, 0.3, 0.0, -0.4, 0.9, 0.1, 0.0, 0.2, 1.5]);
        let x = random_latents(100, 3, 4);
        let est = &x * a.transpose();
        let out = align_latents(&[x.clone()], &[est]).unwrap();
        assert!((out.matrix - a.try_inverse().unwrap()).abs().max() < 1e-6);
    }

    #[test]
    fn align_flags_degenerate_estimates() {
        let x = random_latents(20, 2, 5);
        let mut est = x.clone();
        est.column_mut(1).fill(0.0);
        let out = align_latents(&[x], &[est]).unwrap();
        assert!(out.degenerate);
    }

    #[test]
    fn dynamics_mse_zero_on_truth_and_shift_invariant() {
        let x = random_latents(25, 2, 6);
        let eye = DMatrix::<f64>::identity(2, 2);
        assert_close!(mse_dynamics(&[x.clone()], &[x.clone()], &eye).unwrap(), 0.0, 1e-15);
        let mut shifted = x.clone();
        for t in 0..x.nrows() {
            shifted[(t, 0)] += 5.0;
            shifted[(t, 1)] -= 2.0;
        }
        assert_close!(mse_dynamics(&[x.clone()], &[shifted], &eye).unwrap(), 0.0, 1e-24);
    }

    #[test]
    fn dynamics_mse_hand_case() {
        // Truth diffs (1,1), est diffs (0,2): mean of (1, 1) = 1.
        let truth = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let est = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 2.0]);
        let eye = DMatrix::<f64>::identity(1, 1);
        assert_close!(mse_dynamics(&[truth], &[est], &eye).unwrap(), 1.0, 1e-15);
    }

    #[test]
    fn dynamics_mse_needs_two_steps() {
        let x = DMatrix::zeros(1, 2);
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!(mse_dynamics(&[x.clone()], &[x], &eye).is_err());
    }

    #[test]
    fn state_mse_trivial_cases() {
        let x = random_latents(15, 3, 7);
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_close!(mse_state(&[x.clone()], &[x.clone()], &eye).unwrap(), 0.0, 1e-15);
        let mut shifted = x.clone();
        for t in 0..x.nrows() {
            shifted[(t, 0)] -= 1.0;
        }
        assert_close!(mse_state(&[x.clone()], &[shifted], &eye).unwrap(), 1.0, 1e-12);
    }

    #[test]
    fn state_mse_matches_direct_formula() {
        let truth = DMatrix::from_column_slice(3, 1, &[0.4, -0.2, 1.1]);
        let est = DMatrix::from_column_slice(3, 1, &[0.1, 0.3, 0.9]);
        let u = DMatrix::from_element(1, 1, 1.3);
        let direct: f64 = (0..3).map(|t| (truth[(t, 0)] - 1.3f64 * est[(t, 0)]).powi(2)).sum::<f64>() / 3.0;
        assert_close!(mse_state(&[truth], &[est], &u).unwrap(), direct, 1e-12);
    }

    #[test]
    fn switch_events_constant_coefs_none() {
        let coefs = DMatrix::from_element(10, 3, 0.4);
        assert!(switch_events_coefs(&coefs, SwitchMode::Dominant).iter().all(|e| !e));
        assert!(switch_events_coefs(&coefs, SwitchMode::ActiveSet { eta: 1e-4 }).iter().all(|e| !e));
    }

    #[test]
    fn switch_events_dominant_hand_case() {
        let coefs = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let events = switch_events_coefs(&coefs, SwitchMode::Dominant);
        assert_eq!(events, vec![false, true, false]);
    }

    #[test]
    fn switch_events_ties_break_to_lower_index() {
        let coefs = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let events = switch_events_coefs(&coefs, SwitchMode::Dominant);
        assert_eq!(events, vec![false, false]);
    }

    #[test]
    fn switch_events_dominant_scale_invariant() {
        let coefs = random_latents(20, 4, 8);
        let a = switch_events_coefs(&coefs, SwitchMode::Dominant);
        let b = switch_events_coefs(&(&coefs * 7.3), SwitchMode::Dominant);
        assert_eq!(a, b);
    }

    #[test]
    fn mse_switch_cases() {
        let events: Vec<bool> = {
            let mut e = vec![false; 10];
            e[3] = true;
            e[7] = true;
            e[9] = true;
            e
        };
        // Rate 0.3 against true rate 0.1 in a single trial.
        let out = mse_switch(&[0.1], &[events]).unwrap();
        assert_close!(out, 0.04, 1e-12);
        let exact = vec![false, true, false, false, true];
        let r = switch_rate(&exact);
        assert_close!(mse_switch(&[r], &[exact]).unwrap(), 0.0, 1e-15);
    }

    fn rotation_params(theta: f64) -> ModelParameters {
        let a = DMatrix::from_row_slice(2, 2, &[theta.cos(), theta.sin(), -theta.sin(), theta.cos()]);
        let f = a - DMatrix::<f64>::identity(2, 2);
        ModelParameters::new(
            vec![f],
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DVector::from_element(2, 1e-4),
            DVector::from_element(2, 1e-4),
            DVector::from_element(1, 0.1),
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn multistep_r2_perfect_model_reaches_one() {
        // Noise-free rotation observed directly; exact coefficients roll the
        // dynamics without error for any k.
        let params = rotation_params(0.2);
        let t_len = 50;
        let mut latents = DMatrix::<f64>::zeros(t_len, 2);
        let mut x = DVector::from_vec(vec![1.0, 0.3]);
        for t in 0..t_len {
            latents.row_mut(t).copy_from(&x.transpose());
            let f = &params.dynamic_operators[0];
            x = &x + f * &x;
        }
        let obs = latents.clone();
        let offsets = DMatrix::zeros(t_len, 2);
        let coefs = DMatrix::from_element(t_len, 1, 1.0);
        for k in [1, 5, 20] {
            let r2 = multistep_r2(&params, &latents, &offsets, &coefs, &obs, k, RolloutCoefs::PerStep).unwrap();
            assert!((r2 - 1.0).abs() < 1e-10, "k={k}: {r2}");
        }
    }

    #[test]
    fn r2_zero_for_mean_predictor_and_hand_value() {
        let obs = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let mean = 2.5;
        let preds = DMatrix::from_element(3, 1, mean);
        assert_close!(r2_of_predictions(&obs, &preds, 1).unwrap(), 0.0, 1e-15);
        // Lag-one predictor: 1 - 3 / 2.75.
        let lag = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_close!(r2_of_predictions(&obs, &lag, 1).unwrap(), 1.0 - 3.0 / 2.75, 1e-12);
    }

    #[test]
    fn multistep_rejects_k_out_of_range() {
        let params = rotation_params(0.1);
        let latents = DMatrix::zeros(5, 2);
        let offsets = DMatrix::zeros(5, 2);
        let coefs = DMatrix::zeros(5, 1);
        let obs = DMatrix::zeros(5, 2);
        assert!(multistep_r2(&params, &latents, &offsets, &coefs, &obs, 5, RolloutCoefs::PerStep).is_err());
        assert!(multistep_r2(&params, &latents, &offsets, &coefs, &obs, 0, RolloutCoefs::PerStep).is_err());
    }

    #[test]
    fn ridge_fit_degenerates_to_offset_solution() {
        let mut rng = derive_rng(91, &[5]);
        for _ in 0..100 {
            let x: DVector<f64> = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let xn: DVector<f64> = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (f, b) = ridge_transition_fit(&x, &xn, 1.0).unwrap();
            assert!(f.abs().max() < 1e-10);
            assert!((b - (&xn - &x)).abs().max() < 1e-10);
        }
    }

    #[test]
    fn ridge_fit_zero_transition() {
        let x = DVector::from_vec(vec![0.5, -1.0]);
        let (f, b) = ridge_transition_fit(&x, &x, 1.0).unwrap();
        assert!(f.abs().max() < 1e-12);
        assert!(b.abs().max() < 1e-12);
    }

    #[test]
    fn ridge_fit_matches_gradient_descent_oracle() {
        // Plain gradient descent on the penalized objective from zero.
        let x = DVector::from_vec(vec![1.0, -0.5]);
        let xn = DVector::from_vec(vec![0.2, 0.9]);
        let lambda = 1.0;
        let (f_fit, b_fit) = ridge_transition_fit(&x, &xn, lambda).unwrap();

        let r = &xn - &x;
        let mut f = DMatrix::<f64>::zeros(2, 2);
        let mut b = DVector::<f64>::zeros(2);
        let step = 0.05;
        for _ in 0..20_000 {
            let resid = &r - &f * &x - &b;
            let gf = &resid * x.transpose() * 2.0 - &f * (2.0 * lambda);
            let gb = resid * 2.0;
            f += gf * step;
            b += gb * step;
        }
        assert!((&f_fit - &f).abs().max() < 1e-6);
        assert!((&b_fit - &b).abs().max() < 1e-6);
    }
}
