// Scratch: per-iteration stability of the NASCAR fit at high obs noise.
use pdlds_core::datagen::{nascar_generate, NascarConfig};
use pdlds_core::learning::{fit, FitConfig, Window};
use pdlds_core::model::Dataset;

fn main() {
    let mut config = NascarConfig::new(8, 500, 10, 1);
    config.obs_noise_var = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1.0);
    let data = nascar_generate(&config).unwrap();
    let train = Dataset {
        trials: data.trials.iter().take(4).cloned().collect(),
        sample_rate: 1.0,
    };

    for iters in [1, 3, 6, 10, 16, 24] {
        let mut fc = FitConfig::defaults(4, 2);
        fc.window = Window::Full;
        fc.xi = 0.945;
        fc.seed = 1;
        fc.max_outer_iters = iters;
        let r = fit(&train, &fc).unwrap();
        let qc = &r.q_coef[0];
        let active = qc.active_mask.iter().filter(|a| **a).count() as f64 / qc.active_mask.len() as f64;
        let mean_abs: f64 = qc.means.iter().map(|v| v.abs()).sum::<f64>() / qc.means.len() as f64;
        let fnorm: f64 = r.params.dynamic_operators.iter().map(|f| f.norm()).sum();
        println!(
            "iter {iters:2}: active={active:.2} |c|={mean_abs:.4} fnorm={fnorm:.3} sx={:.3e},{:.3e} sy0={:.4} sc0={:.4e} elbo={:.1}",
            r.params.state_noise_var[0],
            r.params.state_noise_var[1],
            r.params.obs_noise_var[0],
            r.params.coef_smooth_var[0],
            r.elbo_trace.last().unwrap()
        );
    }
}
