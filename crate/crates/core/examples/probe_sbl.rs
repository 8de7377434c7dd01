// Scratch: dissect the first-iteration sparse regression on oval-track data.
use nalgebra::{DMatrix, DVector};
use pdlds_core::coef::{sbl_df_init, SparseRegressionProblem};
use pdlds_core::datagen::{nascar_generate, NascarConfig};
use pdlds_core::learning::{initialize, FitConfig, Window};
use pdlds_core::model::Dataset;
use pdlds_core::state::{build_tv_lds, kalman_smooth};

fn main() {
    let mut config = NascarConfig::new(8, 500, 10, 1);
    config.obs_noise_var = 1.0;
    let data = nascar_generate(&config).unwrap();
    let train = Dataset { trials: data.trials.iter().take(4).cloned().collect(), sample_rate: 1.0 };

    let mut fc = FitConfig::defaults(4, 2);
    fc.window = Window::Full;
    fc.xi = 0.945;
    fc.seed = 1;
    let (params, latents) = initialize(&train, &fc).unwrap();
    println!("sx = {:?}", params.state_noise_var.as_slice());
    println!("op norms = {:?}", params.dynamic_operators.iter().map(|f| f.norm()).collect::<Vec<_>>());

    // First smoother pass: zero coefficients, full-window offsets.
    let x_hat = &latents[0];
    let t_len = x_hat.nrows();
    let offsets = pdlds_core::state::estimate_offsets(x_hat, t_len).unwrap();
    let coefs = DMatrix::zeros(t_len, 4);
    let lds = build_tv_lds(&params, &coefs, &offsets).unwrap();
    let post = kalman_smooth(&lds, &train.trials[0].obs).unwrap();
    let l_hat = &post.smooth_mean;

    let mut inc_var = 0.0;
    for t in 0..t_len - 1 {
        inc_var += (l_hat.row(t + 1) - l_hat.row(t)).norm_squared();
    }
    println!("smoothed increment var/step = {:.3e}", inc_var / (t_len - 1) as f64);

    let truth = train.trials[0].truth.as_ref().unwrap();
    for t in [100usize, 200, 300] {
        let l_t = l_hat.row(t).transpose();
        let mut design = DMatrix::<f64>::zeros(2, 4);
        for j in 0..4 {
            design.column_mut(j).copy_from(&(&params.dynamic_operators[j] * &l_t));
        }
        let target = l_hat.row(t + 1).transpose() - &l_t;
        // Plain least squares for reference.
        let ls = (design.transpose() * &design + DMatrix::<f64>::identity(4, 4) * 1e-9)
            .try_inverse()
            .unwrap()
            * design.transpose()
            * &target;
        let problem = SparseRegressionProblem {
            design: design.clone(),
            target: target.clone(),
            noise_var: params.state_noise_var.clone(),
            prev_coefs: DVector::zeros(4),
            xi: fc.xi,
        };
        let out = sbl_df_init(&problem, 50, 1e-6).unwrap();
        println!(
            "t={t} (z={} tau={:.2}): |target|={:.3} ls={:?} sbl={:?} gamma={:?}",
            truth.switch_labels[t],
            truth.speeds[t],
            target.norm(),
            ls.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            out.coef_mean.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            out.gamma.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>(),
        );
    }
}
