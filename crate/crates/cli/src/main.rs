//! Command-line harness: generate benchmark datasets, fit either model,
//! evaluate metrics, and run random hyperparameter search.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pdlds_cli::{
    configure_threads, run_eval, run_fit, run_generate, run_search, CliError, EvalArgs, FitArgs,
    GenerateArgs, SearchArgs, Split, System,
};
use pdlds_core::io::ModelKind;
use pdlds_core::learning::Window;

#[derive(Parser)]
#[command(name = "pdlds", about = "Decomposed dynamical systems experiment harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset directory.
    Generate(GenerateCmd),
    /// Fit a model and write a checkpoint with its objective trace.
    Fit(FitCmd),
    /// Evaluate a checkpoint on a dataset split and write metrics.json.
    Eval(EvalCmd),
    /// Random hyperparameter search; writes search.csv sorted best-first.
    Search(SearchCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Nascar,
    Lorenz,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Pdlds,
    Dlds,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct GenerateCmd {
    #[arg(long, value_enum)]
    system: SystemArg,
    #[arg(long)]
    trials: usize,
    #[arg(long)]
    length: usize,
    #[arg(long)]
    obs_dim: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Observation noise variance (defaults to the system's standard level).
    #[arg(long)]
    obs_noise: Option<f64>,
    /// Process noise variance (oval track only).
    #[arg(long, default_value_t = 1e-4)]
    process_noise: f64,
    /// Evaluation points per ramp segment (Lorenz only).
    #[arg(long, default_value_t = 100)]
    n_eval: usize,
}

#[derive(Args)]
struct FitCmd {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long)]
    data: PathBuf,
    /// Number of dynamic operators.
    #[arg(long)]
    k: usize,
    /// Latent dimension.
    #[arg(long)]
    n: usize,
    /// Moving-average window: an integer or "full".
    #[arg(long, default_value = "full")]
    window: String,
    /// Sparsity trade-off weight (probabilistic model).
    #[arg(long, default_value_t = 1.0)]
    xi: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda0: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda2: f64,
    /// Outer iterations (EM or dictionary alternations).
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1)]
    n_samples: usize,
    /// Fit only the train half (even trial indices).
    #[arg(long, default_value_t = false)]
    train_split: bool,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    model_file: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    split: SplitArg,
    /// Comma-separated rollout horizons, e.g. "1,100".
    #[arg(long)]
    k_steps: String,
    #[arg(long, default_value = "metrics.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SearchCmd {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    budget: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "search.csv")]
    out: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    n: usize,
    /// Outer iterations per evaluated configuration.
    #[arg(long, default_value_t = 10)]
    fit_iters: usize,
}

fn parse_window(raw: &str) -> Result<Window, CliError> {
    if raw == "full" {
        return Ok(Window::Full);
    }
    raw.parse::<usize>()
        .map(Window::Size)
        .map_err(|_| CliError::Usage(format!("--window must be an integer or \"full\", got {raw}")))
}

fn parse_k_steps(raw: &str) -> Result<Vec<usize>, CliError> {
    raw.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("invalid k value {part}")))
        })
        .collect()
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(cmd) => {
            let hash = run_generate(&GenerateArgs {
                system: match cmd.system {
                    SystemArg::Nascar => System::Nascar,
                    SystemArg::Lorenz => System::Lorenz,
                },
                trials: cmd.trials,
                length: cmd.length,
                obs_dim: cmd.obs_dim,
                seed: cmd.seed,
                out: cmd.out.clone(),
                obs_noise: cmd.obs_noise,
                process_noise: cmd.process_noise,
                n_eval: cmd.n_eval,
            })?;
            println!("dataset written to {}", cmd.out.display());
            println!("sha256 {hash}");
            Ok(())
        }
        Command::Fit(cmd) => {
            let window = parse_window(&cmd.window)?;
            run_fit(&FitArgs {
                model: match cmd.model {
                    ModelArg::Pdlds => ModelKind::Pdlds,
                    ModelArg::Dlds => ModelKind::Dlds,
                },
                data: cmd.data,
                n_ops: cmd.k,
                n_latent: cmd.n,
                window,
                xi: cmd.xi,
                seed: cmd.seed,
                out: cmd.out.clone(),
                lambda0: cmd.lambda0,
                lambda1: cmd.lambda1,
                lambda2: cmd.lambda2,
                max_iters: cmd.max_iters,
                n_samples: cmd.n_samples,
                train_split_only: cmd.train_split,
            })?;
            println!("model written to {}", cmd.out.join("model.json").display());
            Ok(())
        }
        Command::Eval(cmd) => {
            let k_steps = parse_k_steps(&cmd.k_steps)?;
            run_eval(&EvalArgs {
                model_file: cmd.model_file,
                data: cmd.data,
                split: match cmd.split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                },
                k_steps,
                out: cmd.out.clone(),
            })?;
            println!("metrics written to {}", cmd.out.display());
            Ok(())
        }
        Command::Search(cmd) => {
            run_search(&SearchArgs {
                model: match cmd.model {
                    ModelArg::Pdlds => ModelKind::Pdlds,
                    ModelArg::Dlds => ModelKind::Dlds,
                },
                data: cmd.data,
                budget: cmd.budget,
                seed: cmd.seed,
                out: cmd.out.clone(),
                n_ops: cmd.k,
                n_latent: cmd.n,
                fit_iters: cmd.fit_iters,
            })?;
            println!("search results written to {}", cmd.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
