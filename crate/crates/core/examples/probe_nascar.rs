// Scratch rehearsal of the oval-track benchmark comparison.
use std::time::Instant;

use nalgebra::DMatrix;
use pdlds_core::baseline::{bpdn_df_infer, dlds_learn, BpdnDfConfig};
use pdlds_core::datagen::{nascar_generate, NascarConfig};
use pdlds_core::learning::{fit, infer_on_heldout, FitConfig, Window};
use pdlds_core::metrics::{
    align_latents, mse_dynamics, mse_switch, multistep_r2, switch_events_coefs, switch_events_labels,
    switch_rate, RolloutCoefs, SwitchMode,
};
use pdlds_core::model::Dataset;

fn split(data: &Dataset) -> (Dataset, Dataset) {
    let train: Vec<_> = data.trials.iter().enumerate().filter(|(i, _)| i % 2 == 0).map(|(_, t)| t.clone()).collect();
    let test: Vec<_> = data.trials.iter().enumerate().filter(|(i, _)| i % 2 == 1).map(|(_, t)| t.clone()).collect();
    (
        Dataset::new(train, data.sample_rate).unwrap(),
        Dataset::new(test, data.sample_rate).unwrap(),
    )
}

fn main() {
    let t0 = Instant::now();
    let mut config = NascarConfig::new(20, 1000, 10, 1);
    config.obs_noise_var = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1.0);
    let data = nascar_generate(&config).unwrap();
    let (train, test) = split(&data);
    println!("[{:.1?}] generated", t0.elapsed());

    // p-dLDS
    let mut fc = FitConfig::defaults(4, 2);
    fc.window = Window::Full;
    fc.xi = 0.945;
    fc.seed = 1;
    fc.max_outer_iters = 40;
    let fitres = fit(&train, &fc).unwrap();
    println!(
        "[{:.1?}] pdlds fit: converged={} iters={} elbo_last={:.1}",
        t0.elapsed(),
        fitres.converged,
        fitres.iterations_run,
        fitres.elbo_trace.last().unwrap()
    );
    let mut hc = fc.clone();
    hc.max_outer_iters = 20;
    let heldout = infer_on_heldout(&fitres.params, &test, &hc).unwrap();
    println!("[{:.1?}] pdlds heldout inferred", t0.elapsed());

    let truth: Vec<DMatrix<f64>> = test.trials.iter().map(|t| t.truth.as_ref().unwrap().latents.clone()).collect();
    let est: Vec<DMatrix<f64>> = heldout.q_state.iter().map(|p| p.reconstructed_state.clone()).collect();
    let align = align_latents(&truth, &est).unwrap();
    let p_dyn = mse_dynamics(&truth, &est, &align.matrix).unwrap();

    let true_rates: Vec<f64> = test
        .trials
        .iter()
        .map(|t| switch_rate(&switch_events_labels(&t.truth.as_ref().unwrap().switch_labels)))
        .collect();
    let p_events: Vec<Vec<bool>> = heldout
        .q_coef
        .iter()
        .map(|q| switch_events_coefs(&q.means, SwitchMode::ActiveSet { eta: fc.eta }))
        .collect();
    let p_switch = mse_switch(&true_rates, &p_events).unwrap();

    let mut p_r2 = 0.0;
    for k in [1usize, 5, 20, 100] {
        let mut acc = 0.0;
        for (i, tr) in test.trials.iter().enumerate() {
            let post = &heldout.q_state[i];
            let r2 = multistep_r2(
                &fitres.params,
                &post.smooth_mean,
                &post.offsets,
                &heldout.q_coef[i].means,
                &tr.obs,
                k,
                RolloutCoefs::PerStep,
            )
            .unwrap();
            acc += r2;
        }
        acc /= test.trials.len() as f64;
        println!("pdlds r2_{k} = {acc:.4}");
        if k == 100 {
            p_r2 = acc;
        }
    }
    // Stability of the composed transitions along one test trial.
    let qc = &heldout.q_coef[0];
    let mut max_eig = 0.0f64;
    let mut mean_eig = 0.0;
    for t in 0..qc.means.nrows() - 1 {
        let f = pdlds_core::model::compose_transition(&fitres.params, &qc.means.row(t).transpose()).unwrap();
        let a = DMatrix::<f64>::identity(2, 2) + f;
        let rho = a.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
        max_eig = max_eig.max(rho);
        mean_eig += rho;
    }
    mean_eig /= (qc.means.nrows() - 1) as f64;
    println!("pdlds transition spectral radius: mean {mean_eig:.4} max {max_eig:.4}");
    let active = qc.active_mask.iter().filter(|a| **a).count() as f64 / qc.active_mask.len() as f64;
    println!("pdlds heldout active fraction: {active:.3}");
    println!("elbo tail: {:?}", &fitres.elbo_trace[fitres.elbo_trace.len().saturating_sub(4)..]);
    println!("[{:.1?}] pdlds: dyn={p_dyn:.6e} switch={p_switch:.6e} r2_100={p_r2:.4}", t0.elapsed());

    // dLDS baseline
    let bc = BpdnDfConfig::new(1.044, 0.254, 0.023);
    let learned = dlds_learn(&train, 4, 2, &bc, 8, 1).unwrap();
    println!(
        "[{:.1?}] dlds learned, objective trace {:?}",
        t0.elapsed(),
        learned.objective_trace
    );
    let infers: Vec<_> = test.trials.iter().map(|t| bpdn_df_infer(&learned.params, &t.obs, &bc).unwrap()).collect();
    let d_est: Vec<DMatrix<f64>> = infers.iter().map(|t| t.states.clone()).collect();
    let d_align = align_latents(&truth, &d_est).unwrap();
    let d_dyn = mse_dynamics(&truth, &d_est, &d_align.matrix).unwrap();
    let d_events: Vec<Vec<bool>> = infers
        .iter()
        .map(|t| switch_events_coefs(&t.coefs, SwitchMode::ActiveSet { eta: fc.eta }))
        .collect();
    let d_switch = mse_switch(&true_rates, &d_events).unwrap();
    let mut d_r2 = 0.0;
    for (i, tr) in test.trials.iter().enumerate() {
        let zeros = DMatrix::zeros(tr.obs.nrows(), 2);
        let r2 = multistep_r2(
            &learned.params,
            &infers[i].states,
            &zeros,
            &infers[i].coefs,
            &tr.obs,
            100,
            RolloutCoefs::PerStep,
        )
        .unwrap();
        d_r2 += r2;
    }
    d_r2 /= test.trials.len() as f64;
    println!("[{:.1?}] dlds: dyn={d_dyn:.6e} switch={d_switch:.6e} r2_100={d_r2:.4}", t0.elapsed());

    println!("ordinal: dyn ratio dlds/pdlds = {:.1} (need >= 10)", d_dyn / p_dyn);
    println!("ordinal: switch pdlds < dlds: {}", p_switch < d_switch);
    println!("ordinal: pdlds r2 > 0: {}, dlds r2 < 0: {}", p_r2 > 0.0, d_r2 < 0.0);
}
