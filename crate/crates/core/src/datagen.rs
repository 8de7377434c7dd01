//! Synthetic benchmark generators: a four-region oval track with random
//! per-segment speeds, and the Lorenz attractor with randomly ramped
//! evaluation times, both lifted through a random linear observation map.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PdldsError, Result};
use crate::model::{Dataset, Trial, TrialTruth};
use crate::rng::{derive_rng, streams};

/// Oval-track benchmark configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NascarConfig {
    pub n_trials: usize,
    pub t_len: usize,
    pub obs_dim: usize,
    pub process_noise_var: f64,
    pub obs_noise_var: f64,
    /// Range of the uniform per-segment speed constant.
    pub speed_range: (f64, f64),
    pub seed: u64,
}

impl NascarConfig {
    pub fn new(n_trials: usize, t_len: usize, obs_dim: usize, seed: u64) -> Self {
        NascarConfig {
            n_trials,
            t_len,
            obs_dim,
            process_noise_var: 1e-4,
            obs_noise_var: 1.0,
            speed_range: (0.1, 1.0),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.t_len < 2 {
            return Err(PdldsError::InvalidConfig("t_len must be >= 2".into()));
        }
        if self.n_trials < 1 {
            return Err(PdldsError::InvalidConfig("n_trials must be >= 1".into()));
        }
        if self.obs_dim < 2 {
            return Err(PdldsError::InvalidConfig("obs_dim must be >= 2".into()));
        }
        if !(self.speed_range.0 > 0.0 && self.speed_range.1 >= self.speed_range.0) {
            return Err(PdldsError::InvalidConfig("speed_range must be positive and ordered".into()));
        }
        if self.process_noise_var < 0.0 || self.obs_noise_var < 0.0 {
            return Err(PdldsError::InvalidConfig("noise variances must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Ramped Lorenz benchmark configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LorenzConfig {
    pub n_trials: usize,
    pub t_len: usize,
    /// Evaluation points per ramp segment.
    pub n_eval: usize,
    /// Range of the uniform ramp interval length.
    pub ramp_range: (f64, f64),
    pub obs_dim: usize,
    pub obs_noise_var: f64,
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub seed: u64,
}

impl LorenzConfig {
    pub fn new(n_trials: usize, t_len: usize, obs_dim: usize, seed: u64) -> Self {
        LorenzConfig {
            n_trials,
            t_len,
            n_eval: 100,
            ramp_range: (0.25, 1.5),
            obs_dim,
            obs_noise_var: 4.0,
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.t_len < 2 || self.n_trials < 1 || self.n_eval < 2 {
            return Err(PdldsError::InvalidConfig("need t_len >= 2, n_trials >= 1, n_eval >= 2".into()));
        }
        if !(self.sigma > 0.0 && self.rho > 0.0 && self.beta > 0.0) {
            return Err(PdldsError::InvalidConfig("sigma, rho, beta must be positive".into()));
        }
        if !(self.ramp_range.0 > 0.0 && self.ramp_range.1 >= self.ramp_range.0) {
            return Err(PdldsError::InvalidConfig("ramp_range must be positive and ordered".into()));
        }
        if self.obs_dim < 3 {
            return Err(PdldsError::InvalidConfig("obs_dim must be >= 3".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Oval track.
// ---------------------------------------------------------------------------

/// Region label of a 2-D state: 1 right of x1 = 1, 2 left of x1 = -1, 3 the
/// upper middle band, 4 the lower middle band.
pub fn nascar_region(x: &Vector2<f64>) -> usize {
    if x[0] > 1.0 {
        1
    } else if x[0] < -1.0 {
        2
    } else if x[1] >= 0.0 {
        3
    } else {
        4
    }
}

fn nascar_dynamics(region: usize) -> (Matrix2<f64>, Vector2<f64>) {
    let a = match region {
        1 | 2 => Matrix2::new(0.0, 0.1, -0.1, 0.0),
        _ => Matrix2::zeros(),
    };
    let b = match region {
        1 => Vector2::new(0.0, 0.005),
        2 => Vector2::new(0.0, -0.005),
        3 => Vector2::new(0.1, 0.0),
        _ => Vector2::new(-0.1, 0.0),
    };
    (a, b)
}

/// Matrix exponential by scaling and squaring with a 13-term Taylor core.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil().max(0.0) as u32 } else { 0 };
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut acc = DMatrix::<f64>::identity(n, n);
    for i in 1..=13 {
        term = &term * &scaled / i as f64;
        acc += &term;
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    acc
}

fn nascar_trial(config: &NascarConfig, trial_idx: usize) -> (DMatrix<f64>, Vec<i64>, Vec<f64>) {
    let mut rng = derive_rng(config.seed, &[streams::DATAGEN, trial_idx as u64]);
    let mut latents = DMatrix::<f64>::zeros(config.t_len, 2);
    let mut labels = Vec::with_capacity(config.t_len);
    let mut speeds = Vec::with_capacity(config.t_len);
    let (lo, hi) = config.speed_range;
    let noise_sd = config.process_noise_var.sqrt();

    let mut x = Vector2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let mut region = nascar_region(&x);
    let mut tau = rng.gen_range(lo..=hi);
    for t in 0..config.t_len {
        let r = nascar_region(&x);
        if t == 0 || r != region {
            // A new segment of the track gets a fresh speed constant.
            if t > 0 {
                tau = rng.gen_range(lo..=hi);
            }
            region = r;
        }
        latents[(t, 0)] = x[0];
        latents[(t, 1)] = x[1];
        labels.push(region as i64);
        speeds.push(tau);

        let (a, b) = nascar_dynamics(region);
        let exp_a = matrix_exp(&(DMatrix::from_iterator(2, 2, (a * tau).iter().copied())));
        let mut next = Vector2::new(
            exp_a[(0, 0)] * x[0] + exp_a[(0, 1)] * x[1],
            exp_a[(1, 0)] * x[0] + exp_a[(1, 1)] * x[1],
        );
        next += b * tau;
        next[0] += noise_sd * rng.sample::<f64, _>(StandardNormal);
        next[1] += noise_sd * rng.sample::<f64, _>(StandardNormal);
        x = next;
    }
    (latents, labels, speeds)
}

/// Generates the oval-track dataset with ground-truth latents, region labels,
/// and per-step speed constants.
pub fn nascar_generate(config: &NascarConfig) -> Result<Dataset> {
    config.validate()?;
    let raw: Vec<(DMatrix<f64>, Vec<i64>, Vec<f64>)> = (0..config.n_trials)
        .into_par_iter()
        .map(|i| nascar_trial(config, i))
        .collect();
    lift_dataset(raw, config.obs_dim, config.obs_noise_var, config.seed)
}

// ---------------------------------------------------------------------------
// Lorenz with ramped evaluation times.
// ---------------------------------------------------------------------------

/// The Lorenz vector field.
pub fn lorenz_field(sigma: f64, rho: f64, beta: f64) -> impl Fn(&DVector<f64>) -> DVector<f64> {
    move |x: &DVector<f64>| {
        DVector::from_vec(vec![
            sigma * (x[1] - x[0]),
            x[0] * (rho - x[2]) - x[1],
            x[0] * x[1] - beta * x[2],
        ])
    }
}

/// Ramped evaluation times for one segment: `exp(linspace(0, tau, n)) - 1`.
pub fn ramp_times(tau: f64, n_eval: usize) -> Vec<f64> {
    (0..n_eval)
        .map(|i| {
            let u = tau * i as f64 / (n_eval - 1) as f64;
            u.exp() - 1.0
        })
        .collect()
}

const DOPRI5_MAX_STEPS: usize = 2_000_000;

/// Adaptive Dormand-Prince 5(4) integration with fourth-order dense output,
/// evaluated at the (ascending, nonnegative) `eval_times`.
pub fn integrate_dopri5<F: Fn(&DVector<f64>) -> DVector<f64>>(
    field: F,
    x0: &DVector<f64>,
    eval_times: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Vec<DVector<f64>>> {
    let mut outputs: Vec<DVector<f64>> = Vec::with_capacity(eval_times.len());
    if eval_times.is_empty() {
        return Ok(outputs);
    }
    for w in eval_times.windows(2) {
        if w[1] < w[0] {
            return Err(PdldsError::value("integrate_dopri5", "eval times must be ascending"));
        }
    }
    let t_end = *eval_times.last().unwrap();
    let mut next_eval = 0usize;
    while next_eval < eval_times.len() && eval_times[next_eval] <= 0.0 {
        outputs.push(x0.clone());
        next_eval += 1;
    }
    if next_eval == eval_times.len() {
        return Ok(outputs);
    }

    let mut t = 0.0f64;
    let mut y = x0.clone();
    let mut k1 = field(&y);
    let mut h = 1e-4f64;
    let mut steps = 0usize;

    // Dormand-Prince tableau.
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    // Dense-output weights of the quartic interpolant.
    const D: [f64; 7] = [
        -12715105075.0 / 11282082432.0,
        0.0,
        87487479700.0 / 32700410799.0,
        -10690763975.0 / 1880347072.0,
        701980252875.0 / 199316789632.0,
        -1453857185.0 / 822651844.0,
        69997945.0 / 29380423.0,
    ];

    while t < t_end {
        if steps > DOPRI5_MAX_STEPS {
            return Err(PdldsError::IntegrationFailed { segment: next_eval, detail: "step budget exhausted".into() });
        }
        steps += 1;
        h = h.min(t_end - t);
        let mut k = vec![k1.clone()];
        for stage in 0..6 {
            let mut arg = y.clone();
            for (j, kj) in k.iter().enumerate() {
                if A[stage][j] != 0.0 {
                    arg += kj * (A[stage][j] * h);
                }
            }
            k.push(field(&arg));
        }
        let mut y5 = y.clone();
        for (j, kj) in k.iter().enumerate() {
            if B5[j] != 0.0 {
                y5 += kj * (B5[j] * h);
            }
        }
        let mut err_vec = DVector::<f64>::zeros(y.len());
        for (j, kj) in k.iter().enumerate() {
            let db = B5[j] - B4[j];
            if db != 0.0 {
                err_vec += kj * (db * h);
            }
        }
        let mut err = 0.0;
        for i in 0..y.len() {
            let sc = atol + rtol * y[i].abs().max(y5[i].abs());
            let e = err_vec[i] / sc;
            err += e * e;
        }
        err = (err / y.len() as f64).sqrt();

        if err <= 1.0 {
            // Accept. Serve the dense output for eval times inside (t, t+h].
            let delta = &y5 - &y;
            let cont3 = &k[0] * h - &delta;
            let cont4 = &delta - &k[6] * h - &cont3;
            let mut cont5 = DVector::<f64>::zeros(y.len());
            for (j, kj) in k.iter().enumerate() {
                if D[j] != 0.0 {
                    cont5 += kj * (D[j] * h);
                }
            }
            while next_eval < eval_times.len() && eval_times[next_eval] <= t + h + 1e-14 {
                let theta = ((eval_times[next_eval] - t) / h).clamp(0.0, 1.0);
                let theta1 = 1.0 - theta;
                let inner = &cont4 + &cont5 * theta1;
                let middle = &cont3 + inner * theta;
                let value = &y + (&delta + middle * theta1) * theta;
                outputs.push(value);
                next_eval += 1;
            }
            t += h;
            y = y5;
            k1 = k.pop().unwrap();
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= factor;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            if h < 1e-14 {
                return Err(PdldsError::IntegrationFailed { segment: next_eval, detail: "step size underflow".into() });
            }
        }
    }
    while next_eval < eval_times.len() {
        outputs.push(y.clone());
        next_eval += 1;
    }
    Ok(outputs)
}

fn lorenz_lobe(x1: f64, prev: i64) -> i64 {
    // Hysteresis band around the saddle keeps the label from chattering.
    if x1 > 0.5 {
        1
    } else if x1 < -0.5 {
        0
    } else {
        prev
    }
}

fn lorenz_trial(config: &LorenzConfig, trial_idx: usize) -> Result<(DMatrix<f64>, Vec<i64>, Vec<f64>)> {
    let mut rng = derive_rng(config.seed, &[streams::DATAGEN, trial_idx as u64]);
    let field = lorenz_field(config.sigma, config.rho, config.beta);
    let (rtol, atol) = (1e-8, 1e-9);

    // Random start, then a burn-in onto the attractor.
    let start = DVector::from_vec(vec![
        rng.gen_range(-15.0..15.0),
        rng.gen_range(-15.0..15.0),
        rng.gen_range(5.0..45.0),
    ]);
    let mut state = integrate_dopri5(&field, &start, &[5.0], rtol, atol)
        .map_err(|e| PdldsError::IntegrationFailed { segment: 0, detail: e.to_string() })?
        .pop()
        .unwrap();

    let mut latents_rows: Vec<DVector<f64>> = Vec::with_capacity(config.t_len);
    let mut labels: Vec<i64> = Vec::with_capacity(config.t_len);
    let mut speeds: Vec<f64> = Vec::with_capacity(config.t_len);
    let mut lobe = lorenz_lobe(state[0], 0);
    let mut ramp_idx: i64 = 0;

    // First segment records its initial point; later segments skip the
    // duplicated time-zero state.
    let mut first_segment = true;
    while latents_rows.len() < config.t_len {
        let tau = rng.gen_range(config.ramp_range.0..=config.ramp_range.1);
        let times = ramp_times(tau, config.n_eval);
        let points = integrate_dopri5(&field, &state, &times, rtol, atol)
            .map_err(|e| PdldsError::IntegrationFailed { segment: ramp_idx as usize, detail: e.to_string() })?;
        let skip = if first_segment { 0 } else { 1 };
        for p in points.iter().skip(skip) {
            if latents_rows.len() >= config.t_len {
                break;
            }
            lobe = lorenz_lobe(p[0], lobe);
            latents_rows.push(p.clone());
            // Label combines the ramp index and the attractor lobe: both a
            // lobe crossing and a ramp boundary register as a switch.
            labels.push(ramp_idx * 2 + lobe);
            speeds.push(tau);
        }
        state = points.last().unwrap().clone();
        ramp_idx += 1;
        first_segment = false;
    }

    let mut latents = DMatrix::<f64>::zeros(config.t_len, 3);
    for (t, row) in latents_rows.iter().enumerate() {
        latents.row_mut(t).copy_from(&row.transpose());
    }
    Ok((latents, labels, speeds))
}

/// Generates the ramped-Lorenz dataset with ground-truth latents, combined
/// ramp/lobe labels, and per-step ramp lengths.
pub fn lorenz_generate(config: &LorenzConfig) -> Result<Dataset> {
    config.validate()?;
    let raw: Vec<Result<(DMatrix<f64>, Vec<i64>, Vec<f64>)>> = (0..config.n_trials)
        .into_par_iter()
        .map(|i| lorenz_trial(config, i))
        .collect();
    let mut trials = Vec::with_capacity(raw.len());
    for r in raw {
        trials.push(r?);
    }
    lift_dataset(trials, config.obs_dim, config.obs_noise_var, config.seed)
}

// ---------------------------------------------------------------------------
// Observation lift.
// ---------------------------------------------------------------------------

/// Draws a standard-normal observation matrix and lifts the latents through
/// it with isotropic Gaussian noise. Returns the observations and the matrix.
pub fn obs_lift(latents: &DMatrix<f64>, obs_dim: usize, noise_var: f64, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = latents.ncols();
    if obs_dim < n {
        return Err(PdldsError::dims("obs_lift", format!("obs_dim >= {n}"), obs_dim));
    }
    let mut rng = derive_rng(seed, &[streams::OBS_LIFT]);
    let d = DMatrix::from_fn(obs_dim, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let obs = obs_lift_with(latents, &d, noise_var, seed)?;
    Ok((obs, d))
}

/// Lifts latents through a given observation matrix.
pub fn obs_lift_with(latents: &DMatrix<f64>, obs_matrix: &DMatrix<f64>, noise_var: f64, seed: u64) -> Result<DMatrix<f64>> {
    if obs_matrix.ncols() != latents.ncols() {
        return Err(PdldsError::dims("obs_lift_with", latents.ncols(), obs_matrix.ncols()));
    }
    let mut rng = derive_rng(seed, &[streams::OBS_LIFT, 1]);
    let sd = noise_var.sqrt();
    let mut obs = latents * obs_matrix.transpose();
    for v in obs.iter_mut() {
        *v += sd * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(obs)
}

fn lift_dataset(
    raw: Vec<(DMatrix<f64>, Vec<i64>, Vec<f64>)>,
    obs_dim: usize,
    obs_noise_var: f64,
    seed: u64,
) -> Result<Dataset> {
    let n = raw[0].0.ncols();
    if obs_dim < n {
        return Err(PdldsError::dims("lift_dataset", format!("obs_dim >= {n}"), obs_dim));
    }
    // One shared observation map per dataset.
    let mut rng = derive_rng(seed, &[streams::OBS_LIFT]);
    let d = DMatrix::from_fn(obs_dim, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let trials = raw
        .into_iter()
        .enumerate()
        .map(|(i, (latents, labels, speeds))| {
            let obs = obs_lift_with(&latents, &d, obs_noise_var, crate::rng::mix(seed, &[streams::OBS_LIFT, 2, i as u64]))?;
            Ok(Trial {
                obs,
                truth: Some(TrialTruth { latents, switch_labels: labels, speeds }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trials, 1.0)
}
