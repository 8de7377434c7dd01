//! Experiment pipeline behind the `pdlds` binary: dataset generation, model
//! fitting, evaluation, and random hyperparameter search. The binary is a
//! thin argument parser over these functions so the acceptance suite can
//! drive them directly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use pdlds_core::baseline::{bpdn_df_infer, dlds_learn, BpdnDfConfig};
use pdlds_core::datagen::{lorenz_generate, nascar_generate, LorenzConfig, NascarConfig};
use pdlds_core::io::{
    read_checkpoint, read_dataset, write_checkpoint, write_dataset, Checkpoint, DatasetMeta,
    ModelKind,
};
use pdlds_core::learning::{fit, infer_on_heldout, FitConfig, Window};
use pdlds_core::metrics::{
    align_latents, mse_state, multistep_r2, switch_events_coefs, switch_events_labels, switch_rate,
    RolloutCoefs, SwitchMode,
};
use pdlds_core::model::Dataset;
use pdlds_core::rng::{derive_rng, streams};
use pdlds_core::PdldsError;

/// Pipeline failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations: exit 2.
    Usage(String),
    /// Checkpoint/dataset dimension or format incompatibility: exit 3.
    Incompatible(String),
    /// Anything else: exit 1.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Incompatible(_) => 3,
            CliError::Internal(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Incompatible(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<PdldsError> for CliError {
    fn from(e: PdldsError) -> Self {
        match &e {
            PdldsError::DimensionMismatch { .. } | PdldsError::Parse { .. } | PdldsError::RankDeficient(..) => {
                CliError::Incompatible(e.to_string())
            }
            PdldsError::InvalidConfig(_) | PdldsError::InvalidValue { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Even trial indices train, odd test.
pub fn split_dataset(data: &Dataset) -> (Dataset, Dataset) {
    let train: Vec<_> = data.trials.iter().enumerate().filter(|(i, _)| i % 2 == 0).map(|(_, t)| t.clone()).collect();
    let test: Vec<_> = data.trials.iter().enumerate().filter(|(i, _)| i % 2 == 1).map(|(_, t)| t.clone()).collect();
    (
        Dataset { trials: train, sample_rate: data.sample_rate },
        Dataset { trials: test, sample_rate: data.sample_rate },
    )
}

/// SHA-256 over the directory's files (sorted by name): name, NUL, bytes.
pub fn content_hash(dir: &Path) -> CliResult<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Internal(format!("read_dir {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut hasher = Sha256::new();
    for path in names {
        hasher.update(path.file_name().unwrap().to_string_lossy().as_bytes());
        hasher.update([0u8]);
        let bytes = fs::read(&path).map_err(|e| CliError::Internal(format!("read {}: {e}", path.display())))?;
        hasher.update(&bytes);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Which benchmark generator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Nascar,
    Lorenz,
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub system: System,
    pub trials: usize,
    pub length: usize,
    pub obs_dim: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Observation noise variance; None keeps the system default.
    pub obs_noise: Option<f64>,
    pub process_noise: f64,
    pub n_eval: usize,
}

/// Generates a dataset directory and returns its content hash.
pub fn run_generate(args: &GenerateArgs) -> CliResult<String> {
    let (data, meta) = match args.system {
        System::Nascar => {
            let mut config = NascarConfig::new(args.trials, args.length, args.obs_dim, args.seed);
            config.process_noise_var = args.process_noise;
            if let Some(noise) = args.obs_noise {
                config.obs_noise_var = noise;
            }
            let data = nascar_generate(&config)?;
            let meta = DatasetMeta {
                m: args.obs_dim,
                n_true: 2,
                k_true: 4,
                sample_rate: 1.0,
                generator: serde_json::json!({"system": "nascar", "config": config}),
            };
            (data, meta)
        }
        System::Lorenz => {
            let mut config = LorenzConfig::new(args.trials, args.length, args.obs_dim, args.seed);
            config.n_eval = args.n_eval;
            if let Some(noise) = args.obs_noise {
                config.obs_noise_var = noise;
            }
            let data = lorenz_generate(&config)?;
            let meta = DatasetMeta {
                m: args.obs_dim,
                n_true: 3,
                k_true: 2,
                sample_rate: 1.0,
                generator: serde_json::json!({"system": "lorenz", "config": config}),
            };
            (data, meta)
        }
    };
    write_dataset(&args.out, &data, &meta)?;
    content_hash(&args.out)
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub model: ModelKind,
    pub data: PathBuf,
    pub n_ops: usize,
    pub n_latent: usize,
    pub window: Window,
    pub xi: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_iters: usize,
    pub n_samples: usize,
    pub train_split_only: bool,
}

/// Fits a model on the dataset (train split when `train_split_only`), writing
/// `model.json`, the objective trace, and a fit log into `out`.
pub fn run_fit(args: &FitArgs) -> CliResult<()> {
    let (data, meta) = read_dataset(&args.data)?;
    if args.n_latent > meta.m {
        return Err(CliError::Incompatible(format!(
            "n_latent {} exceeds observation dimension {}",
            args.n_latent, meta.m
        )));
    }
    let working = if args.train_split_only { split_dataset(&data).0 } else { data };
    fs::create_dir_all(&args.out).map_err(|e| CliError::Internal(format!("mkdir {}: {e}", args.out.display())))?;

    match args.model {
        ModelKind::Pdlds => {
            let mut config = FitConfig::defaults(args.n_ops, args.n_latent);
            config.window = args.window;
            config.xi = args.xi;
            config.seed = args.seed;
            config.max_outer_iters = args.max_iters;
            config.n_samples = args.n_samples;
            config.validate()?;
            let result = fit(&working, &config)?;
            let ck = Checkpoint {
                kind: ModelKind::Pdlds,
                params: result.params.clone(),
                config: serde_json::to_value(&config).expect("config serializes"),
                seed: args.seed,
            };
            write_checkpoint(&args.out.join("model.json"), &ck)?;
            let mut trace = String::from("iteration,elbo,std_error\n");
            for (i, (v, se)) in result.elbo_trace.iter().zip(&result.elbo_se_trace).enumerate() {
                trace.push_str(&format!(
                    "{i},{},{}\n",
                    pdlds_core::io::format_float17(*v),
                    pdlds_core::io::format_float17(*se)
                ));
            }
            fs::write(args.out.join("elbo_trace.csv"), trace)
                .map_err(|e| CliError::Internal(format!("write trace: {e}")))?;
            let log = format!(
                "model=pdlds trials={} converged={} iterations={}\n",
                working.len(),
                result.converged,
                result.iterations_run
            );
            fs::write(args.out.join("fit.log"), log).map_err(|e| CliError::Internal(format!("write log: {e}")))?;
        }
        ModelKind::Dlds => {
            let config = BpdnDfConfig::new(args.lambda0, args.lambda1, args.lambda2);
            config.validate()?;
            let result = dlds_learn(&working, args.n_ops, args.n_latent, &config, args.max_iters.max(1), args.seed)?;
            let ck = Checkpoint {
                kind: ModelKind::Dlds,
                params: result.params.clone(),
                config: serde_json::to_value(&config).expect("config serializes"),
                seed: args.seed,
            };
            write_checkpoint(&args.out.join("model.json"), &ck)?;
            let mut trace = String::from("iteration,objective\n");
            for (i, v) in result.objective_trace.iter().enumerate() {
                trace.push_str(&format!("{i},{}\n", pdlds_core::io::format_float17(*v)));
            }
            fs::write(args.out.join("objective_trace.csv"), trace)
                .map_err(|e| CliError::Internal(format!("write trace: {e}")))?;
            let log = format!(
                "model=dlds trials={} outer_iters={} jitter_warnings={}\n",
                working.len(),
                result.objective_trace.len(),
                result.warnings
            );
            fs::write(args.out.join("fit.log"), log).map_err(|e| CliError::Internal(format!("write log: {e}")))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub model_file: PathBuf,
    pub data: PathBuf,
    pub split: Split,
    pub k_steps: Vec<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct MetricsAggregate {
    #[serde(skip_serializing_if = "Option::is_none")]
    dynamics_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    switch_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    state_mse: Option<f64>,
    r2: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
struct MetricsPerTrial {
    #[serde(skip_serializing_if = "Option::is_none")]
    dynamics_mse: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    state_mse: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    switch_rate_true: Option<Vec<f64>>,
    switch_rate_est: Vec<f64>,
    r2: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    model: String,
    split: String,
    n_trials: usize,
    aggregate: MetricsAggregate,
    per_trial: MetricsPerTrial,
}

/// Inferred latent estimates for one trial, shared between the two models.
struct TrialEstimate {
    latents: DMatrix<f64>,
    offsets: DMatrix<f64>,
    coefs: DMatrix<f64>,
    reconstructed: DMatrix<f64>,
}

/// Runs held-out inference and writes `metrics.json`.
pub fn run_eval(args: &EvalArgs) -> CliResult<()> {
    if args.k_steps.is_empty() {
        return Err(CliError::Usage("need at least one --k-steps value".into()));
    }
    let ck = read_checkpoint(&args.model_file)?;
    let (data, meta) = read_dataset(&args.data)?;
    if meta.m != ck.params.n_obs() {
        return Err(CliError::Incompatible(format!(
            "checkpoint expects M = {}, dataset has M = {}",
            ck.params.n_obs(),
            meta.m
        )));
    }
    let (train, test) = split_dataset(&data);
    let subset = match args.split {
        Split::Train => train,
        Split::Test => test,
    };
    if subset.is_empty() {
        return Err(CliError::Incompatible("selected split is empty".into()));
    }
    let min_t = subset.trials.iter().map(|t| t.obs.nrows()).min().unwrap();
    for &k in &args.k_steps {
        if k >= min_t {
            return Err(CliError::Incompatible(format!("k = {k} must be below the trial length {min_t}")));
        }
    }

    let eta = match &ck.kind {
        ModelKind::Pdlds => ck
            .config
            .get("eta")
            .and_then(|v| v.as_f64())
            .unwrap_or(1e-4),
        ModelKind::Dlds => 1e-4,
    };

    let estimates: Vec<TrialEstimate> = match ck.kind {
        ModelKind::Pdlds => {
            let mut config: FitConfig =
                serde_json::from_value(ck.config.clone()).map_err(|e| CliError::Incompatible(format!("config echo: {e}")))?;
            config.max_outer_iters = config.max_outer_iters.min(25);
            let heldout = infer_on_heldout(&ck.params, &subset, &config)?;
            heldout
                .q_state
                .iter()
                .zip(&heldout.q_coef)
                .map(|(post, qc)| TrialEstimate {
                    latents: post.smooth_mean.clone(),
                    offsets: post.offsets.clone(),
                    coefs: qc.means.clone(),
                    reconstructed: post.reconstructed_state.clone(),
                })
                .collect()
        }
        ModelKind::Dlds => {
            let config: BpdnDfConfig =
                serde_json::from_value(ck.config.clone()).map_err(|e| CliError::Incompatible(format!("config echo: {e}")))?;
            let inferred: Vec<_> = subset
                .trials
                .par_iter()
                .map(|tr| bpdn_df_infer(&ck.params, &tr.obs, &config))
                .collect::<Result<Vec<_>, _>>()?;
            inferred
                .into_iter()
                .map(|traj| {
                    let zeros = DMatrix::zeros(traj.states.nrows(), traj.states.ncols());
                    TrialEstimate {
                        reconstructed: traj.states.clone(),
                        latents: traj.states,
                        offsets: zeros,
                        coefs: traj.coefs,
                    }
                })
                .collect()
        }
    };

    let has_truth = subset.trials.iter().all(|t| t.truth.is_some());
    let (dynamics_per_trial, state_per_trial, true_rates) = if has_truth {
        let truth: Vec<DMatrix<f64>> = subset.trials.iter().map(|t| t.truth.as_ref().unwrap().latents.clone()).collect();
        let est: Vec<DMatrix<f64>> = estimates.iter().map(|e| e.reconstructed.clone()).collect();
        let align = align_latents(&truth, &est)?;
        let mut dyn_per = Vec::new();
        let mut state_per = Vec::new();
        for (x, xh) in truth.iter().zip(&est) {
            dyn_per.push(pdlds_core::metrics::mse_dynamics(
                std::slice::from_ref(x),
                std::slice::from_ref(xh),
                &align.matrix,
            )?);
            state_per.push(mse_state(std::slice::from_ref(x), std::slice::from_ref(xh), &align.matrix)?);
        }
        let rates: Vec<f64> = subset
            .trials
            .iter()
            .map(|t| switch_rate(&switch_events_labels(&t.truth.as_ref().unwrap().switch_labels)))
            .collect();
        (Some(dyn_per), Some(state_per), Some(rates))
    } else {
        (None, None, None)
    };

    let est_rates: Vec<f64> = estimates
        .iter()
        .map(|e| switch_rate(&switch_events_coefs(&e.coefs, SwitchMode::ActiveSet { eta })))
        .collect();

    let mut r2_per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &k in &args.k_steps {
        let values: Vec<f64> = estimates
            .iter()
            .zip(&subset.trials)
            .map(|(e, tr)| {
                multistep_r2(&ck.params, &e.latents, &e.offsets, &e.coefs, &tr.obs, k, RolloutCoefs::PerStep)
                    .map_err(CliError::from)
            })
            .collect::<CliResult<Vec<f64>>>()?;
        r2_per.insert(format!("k{k}"), values);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let aggregate = MetricsAggregate {
        dynamics_mse: dynamics_per_trial.as_ref().map(|v| mean(v)),
        switch_mse: true_rates.as_ref().map(|rates| {
            rates
                .iter()
                .zip(&est_rates)
                .map(|(r, rh)| (r - rh) * (r - rh))
                .sum::<f64>()
                / rates.len() as f64
        }),
        state_mse: state_per_trial.as_ref().map(|v| mean(v)),
        r2: r2_per.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
    };
    let report = MetricsReport {
        model: ck.kind.as_str().to_string(),
        split: match args.split {
            Split::Train => "train".into(),
            Split::Test => "test".into(),
        },
        n_trials: subset.len(),
        aggregate,
        per_trial: MetricsPerTrial {
            dynamics_mse: dynamics_per_trial,
            state_mse: state_per_trial,
            switch_rate_true: true_rates,
            switch_rate_est: est_rates,
            r2: r2_per,
        },
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&args.out, json + "\n").map_err(|e| CliError::Internal(format!("write {}: {e}", args.out.display())))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SearchArgs {
    pub model: ModelKind,
    pub data: PathBuf,
    pub budget: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub n_ops: usize,
    pub n_latent: usize,
    pub fit_iters: usize,
}

fn log_uniform<R: rand::Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.gen_range(lo.ln()..=hi.ln());
    u.exp()
}

/// Random hyperparameter search; writes `search.csv` sorted best-first.
pub fn run_search(args: &SearchArgs) -> CliResult<()> {
    if args.budget < 1 {
        return Err(CliError::Usage("budget must be >= 1".into()));
    }
    let (data, _) = read_dataset(&args.data)?;
    let (train, test) = split_dataset(&data);
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Incompatible("need at least one train and one test trial".into()));
    }
    let min_t = data.trials.iter().map(|t| t.obs.nrows()).min().unwrap();

    match args.model {
        ModelKind::Pdlds => {
            // xi log-uniform on [1e-3, 1e3], window uniform on {2..T}.
            let samples: Vec<(f64, usize)> = (0..args.budget)
                .map(|i| {
                    let mut rng = derive_rng(args.seed, &[streams::SEARCH, i as u64]);
                    let xi = log_uniform(&mut rng, 1e-3, 1e3);
                    let window = rng.gen_range(2..=min_t);
                    (xi, window)
                })
                .collect();
            let rows: Vec<(usize, f64, usize, Option<f64>)> = samples
                .par_iter()
                .enumerate()
                .map(|(i, (xi, window))| {
                    let mut config = FitConfig::defaults(args.n_ops, args.n_latent);
                    config.xi = *xi;
                    config.window = Window::Size(*window);
                    config.seed = args.seed;
                    config.max_outer_iters = args.fit_iters;
                    let objective = fit(&train, &config)
                        .and_then(|r| {
                            let mut heldout_config = config.clone();
                            heldout_config.max_outer_iters = args.fit_iters.min(10);
                            infer_on_heldout(&r.params, &test, &heldout_config)
                        })
                        .ok()
                        .and_then(|h| h.elbo_trace.last().copied())
                        .filter(|v| v.is_finite());
                    (i, *xi, *window, objective)
                })
                .collect();
            let mut sorted = rows;
            // Validation ELBO: higher is better; failures sink to the bottom.
            sorted.sort_by(|a, b| match (a.3, b.3) {
                (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Equal),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => a.0.cmp(&b.0),
            });
            let mut out = String::from("rank,sample_index,xi,window,objective,status\n");
            for (rank, (i, xi, window, obj)) in sorted.iter().enumerate() {
                match obj {
                    Some(v) => out.push_str(&format!(
                        "{rank},{i},{},{window},{},ok\n",
                        pdlds_core::io::format_float17(*xi),
                        pdlds_core::io::format_float17(*v)
                    )),
                    None => out.push_str(&format!(
                        "{rank},{i},{},{window},,failed\n",
                        pdlds_core::io::format_float17(*xi)
                    )),
                }
            }
            fs::write(&args.out, out).map_err(|e| CliError::Internal(format!("write {}: {e}", args.out.display())))?;
        }
        ModelKind::Dlds => {
            let samples: Vec<(f64, f64, f64)> = (0..args.budget)
                .map(|i| {
                    let mut rng = derive_rng(args.seed, &[streams::SEARCH, i as u64]);
                    (
                        log_uniform(&mut rng, 1e-3, 1e3),
                        log_uniform(&mut rng, 1e-3, 1e3),
                        log_uniform(&mut rng, 1e-3, 1e3),
                    )
                })
                .collect();
            let rows: Vec<(usize, (f64, f64, f64), Option<f64>)> = samples
                .par_iter()
                .enumerate()
                .map(|(i, lambdas)| {
                    let config = BpdnDfConfig::new(lambdas.0, lambdas.1, lambdas.2);
                    let objective = dlds_learn(&train, args.n_ops, args.n_latent, &config, args.fit_iters.max(1), args.seed)
                        .and_then(|learned| {
                            let mut total = 0.0;
                            for tr in &test.trials {
                                total += bpdn_df_infer(&learned.params, &tr.obs, &config)?.objective;
                            }
                            Ok(total)
                        })
                        .ok()
                        .filter(|v| v.is_finite());
                    (i, *lambdas, objective)
                })
                .collect();
            let mut sorted = rows;
            // Inference objective: lower is better.
            sorted.sort_by(|a, b| match (a.2, b.2) {
                (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => a.0.cmp(&b.0),
            });
            let mut out = String::from("rank,sample_index,lambda0,lambda1,lambda2,objective,status\n");
            for (rank, (i, (l0, l1, l2), obj)) in sorted.iter().enumerate() {
                let f = pdlds_core::io::format_float17;
                match obj {
                    Some(v) => out.push_str(&format!("{rank},{i},{},{},{},{},ok\n", f(*l0), f(*l1), f(*l2), f(*v))),
                    None => out.push_str(&format!("{rank},{i},{},{},{},,failed\n", f(*l0), f(*l1), f(*l2))),
                }
            }
            fs::write(&args.out, out).map_err(|e| CliError::Internal(format!("write {}: {e}", args.out.display())))?;
        }
    }
    Ok(())
}

/// Builds the global worker pool from `PDLDS_THREADS` when set.
pub fn configure_threads() {
    if let Ok(threads) = std::env::var("PDLDS_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
