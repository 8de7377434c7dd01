//! Smoother correctness against a dense joint-Gaussian oracle, and the
//! conjugate-case ELBO identity.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use pdlds_core::model::{elbo, CoefficientPosterior, GammaPosterior, ModelParameters, BETA_FLOOR};
use pdlds_core::rng::derive_rng;
use pdlds_core::state::{build_tv_lds, kalman_smooth, TimeVaryingLDS};
use pdlds_core::testing::dense_smoother_oracle;

fn random_lds(n: usize, m: usize, t_len: usize, seed: u64) -> TimeVaryingLDS {
    let mut rng = derive_rng(seed, &[200]);
    let transitions = (0..t_len - 1)
        .map(|_| {
            DMatrix::<f64>::identity(n, n)
                + DMatrix::from_fn(n, n, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let controls = vec![DVector::zeros(n); t_len - 1];
    let offsets = DMatrix::from_fn(t_len, n, |_, _| 0.2 * rng.sample::<f64, _>(StandardNormal));
    let obs_matrix = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let obs_offset = DVector::from_fn(m, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
    let mut effective = DMatrix::zeros(t_len, m);
    for t in 0..t_len {
        let o = &obs_offset + &obs_matrix * offsets.row(t).transpose();
        effective.row_mut(t).copy_from(&o.transpose());
    }
    TimeVaryingLDS {
        transitions,
        controls,
        effective_obs_offset: effective,
        offsets,
        obs_noise_var: DVector::from_fn(m, |_, _| 0.2 + rng.sample::<f64, _>(StandardNormal).abs()),
        state_noise_var: DVector::from_fn(n, |_, _| 0.1 + 0.5 * rng.sample::<f64, _>(StandardNormal).abs()),
        obs_matrix,
        init_state_mean: DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)),
        init_state_var: DVector::from_fn(n, |_, _| 0.3 + rng.sample::<f64, _>(StandardNormal).abs()),
    }
}

fn random_obs(m: usize, t_len: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = derive_rng(seed, &[201]);
    DMatrix::from_fn(t_len, m, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn smoother_matches_dense_oracle_on_grid() {
    let mut case = 0u64;
    for n in [1usize, 2] {
        for m in [1usize, 3] {
            for t_len in [3usize, 8] {
                case += 1;
                let lds = random_lds(n, m, t_len, 300 + case);
                let obs = random_obs(m, t_len, 400 + case);
                let post = kalman_smooth(&lds, &obs).unwrap();
                let (oracle_mean, oracle_cov, _) = dense_smoother_oracle(&lds, &obs);

                let mut max_mean_err = 0.0f64;
                let mut max_cov_err = 0.0f64;
                for t in 0..t_len {
                    for i in 0..n {
                        max_mean_err = max_mean_err.max((post.smooth_mean[(t, i)] - oracle_mean[t * n + i]).abs());
                        for j in 0..n {
                            max_cov_err = max_cov_err
                                .max((post.smooth_var[t][(i, j)] - oracle_cov[(t * n + i, t * n + j)]).abs());
                        }
                    }
                }
                for t in 0..t_len - 1 {
                    for i in 0..n {
                        for j in 0..n {
                            max_cov_err = max_cov_err
                                .max((post.pair_cov[t][(i, j)] - oracle_cov[(t * n + i, (t + 1) * n + j)]).abs());
                        }
                    }
                }
                assert!(max_mean_err < 1e-8, "N={n} M={m} T={t_len}: mean err {max_mean_err}");
                assert!(max_cov_err < 1e-7, "N={n} M={m} T={t_len}: cov err {max_cov_err}");
            }
        }
    }
}

#[test]
fn filtered_likelihood_matches_dense_marginal() {
    for seed in 0..4u64 {
        let lds = random_lds(1, 1, 6, 500 + seed);
        let obs = random_obs(1, 6, 600 + seed);
        let post = kalman_smooth(&lds, &obs).unwrap();
        let (_, _, oracle_marginal) = dense_smoother_oracle(&lds, &obs);
        assert!(
            (post.log_likelihood - oracle_marginal).abs() < 1e-6,
            "seed {seed}: {} vs {}",
            post.log_likelihood,
            oracle_marginal
        );
    }
}

fn conjugate_case() -> (ModelParameters, DMatrix<f64>, f64, usize) {
    let t_len = 4usize;
    let xi = 1.5f64;
    let params = ModelParameters::new(
        vec![DMatrix::from_element(1, 1, 0.3)],
        DMatrix::from_element(1, 1, 1.2),
        DVector::from_element(1, 0.4),
        DVector::from_element(1, 0.5),
        DVector::from_element(1, 0.3),
        DVector::from_element(1, 0.2),
        DVector::from_element(1, -0.1),
        DVector::from_element(1, 0.8),
    )
    .unwrap();
    let mut rng = derive_rng(42, &[202]);
    let obs = DMatrix::from_fn(t_len, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    (params, obs, xi, t_len)
}

/// Expected ELBO in the clamped-coefficient conjugate case: the exact state
/// posterior makes the state part equal the log evidence; the variance
/// posterior equals its conditional prior so those terms cancel; what remains
/// is the analytic mean of the coefficient-transition constants.
fn conjugate_elbo_target(params: &ModelParameters, obs: &DMatrix<f64>, xi: f64) -> f64 {
    let t_len = obs.nrows();
    let coefs = DMatrix::zeros(t_len, 1);
    let offsets = DMatrix::zeros(t_len, 1);
    let lds = build_tv_lds(params, &coefs, &offsets).unwrap();
    let (_, _, log_marginal) = dense_smoother_oracle(&lds, obs);
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let smooth_const = -0.5 * (ln_2pi + params.coef_smooth_var[0].ln());
    // E[ln gamma] under IG(xi, beta) is ln beta - digamma(xi).
    let e_ln_gamma = BETA_FLOOR.ln() - statrs::function::gamma::digamma(xi);
    let shrink_const = -0.5 * (ln_2pi + e_ln_gamma);
    log_marginal + (t_len as f64 - 1.0) * (smooth_const + shrink_const)
}

fn conjugate_posteriors(
    params: &ModelParameters,
    obs: &DMatrix<f64>,
    xi: f64,
) -> (pdlds_core::model::StatePosterior, CoefficientPosterior, GammaPosterior) {
    let t_len = obs.nrows();
    let coefs = DMatrix::zeros(t_len, 1);
    let offsets = DMatrix::zeros(t_len, 1);
    let lds = build_tv_lds(params, &coefs, &offsets).unwrap();
    let post = kalman_smooth(&lds, obs).unwrap();
    let q_coef = CoefficientPosterior::new(DMatrix::zeros(t_len, 1), DMatrix::from_element(t_len, 1, 1.0), 1e-4).unwrap();
    let q_gamma = GammaPosterior::new(
        DMatrix::from_element(t_len, 1, xi),
        DMatrix::from_element(t_len, 1, BETA_FLOOR),
    )
    .unwrap();
    (post, q_coef, q_gamma)
}

#[test]
fn elbo_matches_log_evidence_in_conjugate_case() {
    let (params, obs, xi, _) = conjugate_case();
    let (post, q_coef, q_gamma) = conjugate_posteriors(&params, &obs, xi);
    let est = elbo(&params, &post, &q_coef, &q_gamma, &obs, xi, 4000, 7).unwrap();
    let target = conjugate_elbo_target(&params, &obs, xi);
    assert!(
        (est.value - target).abs() < 4.0 * est.std_error + 1e-9,
        "elbo {} vs target {} (se {})",
        est.value,
        target,
        est.std_error
    );
}

#[test]
fn elbo_never_exceeds_log_evidence() {
    let (params, obs, xi, t_len) = conjugate_case();
    let (post, q_coef, q_gamma) = conjugate_posteriors(&params, &obs, xi);
    let target = conjugate_elbo_target(&params, &obs, xi);
    // Perturb the state posterior mean on a grid; the bound must not rise
    // above the evidence beyond Monte-Carlo error.
    for shift in [-0.8, -0.3, 0.0, 0.3, 0.8] {
        let mut perturbed = post.clone();
        for t in 0..t_len {
            perturbed.smooth_mean[(t, 0)] += shift;
            perturbed.reconstructed_state[(t, 0)] += shift;
        }
        let est = elbo(&params, &perturbed, &q_coef, &q_gamma, &obs, xi, 2000, 11).unwrap();
        assert!(
            est.value <= target + 4.0 * est.std_error,
            "shift {shift}: elbo {} exceeds evidence {}",
            est.value,
            target
        );
        if shift != 0.0 {
            // A displaced posterior must strictly lose.
            assert!(
                est.value < target,
                "shift {shift}: elbo {} did not drop below {}",
                est.value,
                target
            );
        }
    }
}
