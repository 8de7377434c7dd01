// Scratch diagnostics for the EM loop; not part of the deliverable surface.
use nalgebra::{DMatrix, DVector};
use pdlds_core::learning::{fit, FitConfig, Window};
use pdlds_core::model::{Dataset, ModelParameters, Trial};
use pdlds_core::rng::derive_rng;
use rand::Rng;
use rand_distr::StandardNormal;

fn known_lds_data(seed: u64, n_trials: usize, t_len: usize, m: usize) -> (Dataset, ModelParameters) {
    let theta: f64 = 0.12;
    let a = DMatrix::from_row_slice(2, 2, &[theta.cos(), theta.sin(), -theta.sin(), theta.cos()]);
    let f1 = &a - DMatrix::<f64>::identity(2, 2);
    let mut rng = derive_rng(seed, &[700]);
    let d = DMatrix::from_fn(m, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let process_sd = 0.01f64;
    let obs_sd = 0.05f64;
    let trials: Vec<Trial> = (0..n_trials)
        .map(|_| {
            let mut x = DVector::from_fn(2, |_, _| 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal));
            let mut obs = DMatrix::zeros(t_len, m);
            for t in 0..t_len {
                let y = &d * &x + DVector::from_fn(m, |_, _| obs_sd * rng.sample::<f64, _>(StandardNormal));
                obs.row_mut(t).copy_from(&y.transpose());
                x = &a * &x + DVector::from_fn(2, |_, _| process_sd * rng.sample::<f64, _>(StandardNormal));
            }
            Trial { obs, truth: None }
        })
        .collect();
    let params = ModelParameters::new(
        vec![f1],
        d,
        DVector::zeros(m),
        DVector::from_element(m, obs_sd * obs_sd),
        DVector::from_element(2, process_sd * process_sd),
        DVector::from_element(1, 0.1),
        DVector::from_element(2, 1.0),
        DVector::from_element(2, 1.0),
    )
    .unwrap();
    (Dataset::new(trials, 1.0).unwrap(), params)
}

fn main() {
    let (data, true_params) = known_lds_data(5, 3, 200, 6);
    let mut config = FitConfig::defaults(1, 2);
    config.window = Window::Full;
    config.xi = 1.0;
    config.seed = 11;
    config.max_outer_iters = 30;

    for iters in [1, 2, 4, 6, 8, 10, 15, 20, 30] {
        let mut c = config.clone();
        
        c.max_outer_iters = iters;
        let r = fit(&data, &c).unwrap();
        let qc = &r.q_coef[0];
        let active = qc.active_mask.iter().filter(|a| **a).count() as f64 / qc.active_mask.len() as f64;
        let mean_abs: f64 = qc.means.iter().map(|v| v.abs()).sum::<f64>() / qc.means.len() as f64;
        let mean_var: f64 = qc.variances.iter().sum::<f64>() / qc.variances.len() as f64;
        println!(
            "iter {iters}: active={active:.2} |c|={mean_abs:.4} qvar={mean_var:.4} fnorm={:.3} sx={:.6} sy0={:.5} sc={:.5} elbo={:.1}",
            r.params.dynamic_operators[0].norm(),
            r.params.state_noise_var.max(),
            r.params.obs_noise_var[0],
            r.params.coef_smooth_var[0],
            r.elbo_trace.last().unwrap()
        );
    }

    let result = fit(&data, &config).unwrap();
    println!("converged={} iters={}", result.converged, result.iterations_run);
    println!("elbo head: {:?}", &result.elbo_trace[..result.elbo_trace.len().min(5)]);
    println!("elbo tail: {:?}", &result.elbo_trace[result.elbo_trace.len().saturating_sub(5)..]);
    println!("true f1: {:?}", true_params.dynamic_operators[0].as_slice());
    println!("fit  f1: {:?}", result.params.dynamic_operators[0].as_slice());
    println!("obs_noise_var: {:?}", result.params.obs_noise_var.as_slice());
    println!("state_noise_var: {:?}", result.params.state_noise_var.as_slice());
    println!("coef_smooth_var: {:?}", result.params.coef_smooth_var.as_slice());
    let qc = &result.q_coef[0];
    let t_show = [0usize, 50, 100, 150, 198];
    for t in t_show {
        println!(
            "t={t}: c={:.4} var={:.5} active={}",
            qc.means[(t, 0)],
            qc.variances[(t, 0)],
            qc.active_mask[(t, 0)]
        );
    }
    let active_frac = qc.active_mask.iter().filter(|a| **a).count() as f64 / qc.active_mask.len() as f64;
    println!("active fraction: {active_frac}");
    // Magnitude of composed dynamics vs truth.
    let scale = result.params.dynamic_operators[0].norm() / true_params.dynamic_operators[0].norm();
    println!("operator norm ratio fit/true: {scale}");
}
