//! `ropelab`: figure data, bound checks and toy-model experiments.
//!
//! Each subcommand resolves its parameters from defaults, then the JSON file
//! given by `--config`, then flags. The output directory is taken from
//! `--out-dir`, else `ROPELAB_OUT_DIR`, else the config file, else `out`.
//!
//! Exit status: 0 success, 1 other failure, 2 invalid argument, 3 i/o or
//! checkpoint error, 4 property violation.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ropelab::toy::ExtensionMethod;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ropelab", version, about = "Rotary position embedding and position interpolation experiments")]
struct Cli {
    /// JSON file with parameters for the subcommand; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for all outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the score basis to random targets and dump the extrapolation and
    /// interpolation curves.
    FigExtrapolation(FigExtrapolationArgs),
    /// Tabulate B(s) = sum_k |A_{k+1}(s)|.
    BCurve(BCurveArgs),
    /// Randomized check of the interpolation bound; fails on any violation.
    VerifyBounds(VerifyBoundsArgs),
    /// Pretrain a toy model on the synthetic corpus.
    Train(TrainArgs),
    /// Extend a checkpoint's context window and optionally fine-tune it.
    Extend(ExtendArgs),
    /// Sliding-window perplexity on held-out synthetic text.
    EvalPpl(EvalPplArgs),
    /// Passkey retrieval at evenly spaced distances, with k_max.
    EvalPasskey(EvalPasskeyArgs),
}

#[derive(Debug, Args)]
struct FigExtrapolationArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Head dimension.
    #[arg(long)]
    d: Option<usize>,
    /// RoPE base.
    #[arg(long)]
    c: Option<f64>,
    /// Fit range [0, window).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    eval_end: Option<usize>,
    #[arg(long)]
    ridge_eps: Option<f64>,
}

#[derive(Debug, Args)]
struct BCurveArgs {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    s_end: Option<u64>,
}

#[derive(Debug, Args)]
struct VerifyBoundsArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    c: Option<f64>,
    /// Intervals are drawn inside [0, window).
    #[arg(long)]
    window: Option<u64>,
    /// Scales the bound; used to check that violations are caught.
    #[arg(long, hide = true)]
    bound_scale: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Training context length L.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// RoPE base of the toy model.
    #[arg(long)]
    c: Option<f64>,
}

#[derive(Debug, Args)]
struct ExtendArgs {
    /// Checkpoint to extend (default: pretrained.ckpt in the output directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    extended_window: Option<usize>,
    #[arg(long, value_parser = parse_method)]
    method: Option<ExtensionMethod>,
    /// Fine-tuning steps at the extended window.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalPplArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation window; must not exceed the model's window.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalPasskeyArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Window the passkey documents fill.
    #[arg(long)]
    extended_window: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
}

fn parse_method(s: &str) -> Result<ExtensionMethod, String> {
    s.parse().map_err(|e: ropelab::Error| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    use config::set;
    let file = cli.config.as_deref();
    match cli.command {
        Command::FigExtrapolation(a) => {
            let loaded = config::load::<config::FigExtrapolationConfig>(file)?;
            let mut cfg = loaded.params;
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.d, a.d);
            set(&mut cfg.c, a.c);
            set(&mut cfg.window, a.window);
            set(&mut cfg.eval_end, a.eval_end);
            set(&mut cfg.ridge_eps, a.ridge_eps);
            commands::fig_extrapolation(&cfg, &config::resolve_out_dir(cli.out_dir, loaded.out_dir))
        }
        Command::BCurve(a) => {
            let loaded = config::load::<config::BCurveConfig>(file)?;
            let mut cfg = loaded.params;
            set(&mut cfg.d, a.d);
            set(&mut cfg.c, a.c);
            set(&mut cfg.s_end, a.s_end);
            commands::b_curve(&cfg, &config::resolve_out_dir(cli.out_dir, loaded.out_dir))
        }
        Command::VerifyBounds(a) => {
            let loaded = config::load::<config::VerifyBoundsConfig>(file)?;
            let mut cfg = loaded.params;
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.trials, a.trials);
            set(&mut cfg.d, a.d);
            set(&mut cfg.c, a.c);
            set(&mut cfg.window, a.window);
            set(&mut cfg.bound_scale, a.bound_scale);
            commands::verify_bounds(&cfg, &config::resolve_out_dir(cli.out_dir, loaded.out_dir))
        }
        Command::Train(a) => {
            let loaded = config::load::<config::TrainConfig>(file)?;
            let mut cfg = loaded.params;
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.window, a.window);
            set(&mut cfg.steps, a.steps);
            set(&mut cfg.training.learning_rate, a.learning_rate);
            set(&mut cfg.training.batch_size, a.batch_size);
            set(&mut cfg.rope_base, a.c);
            commands::train(&cfg, &config::resolve_out_dir(cli.out_dir, loaded.out_dir))
        }
        Command::Extend(a) => {
            let loaded = config::load::<config::ExtendConfig>(file)?;
            let mut cfg = loaded.params;
            set(&mut cfg.checkpoint, a.checkpoint.map(Some));
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.extended_window, a.extended_window.map(Some));
            set(&mut cfg.method, a.method);
            set(&mut cfg.steps, a.steps);
            set(&mut cfg.training.learning_rate, a.learning_rate);
            commands::extend(cfg, &config::resolve_out_dir(cli.out_dir, loaded.out_dir))
        }
        Command::EvalPpl(a) => {
            let loaded = config::load::<config::EvalPplConfig>(file)?;
            let mut cfg = loaded.params;
            set(&mut cfg.checkpoint, a.checkpoint.map(Some));
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.window, a.window.map(Some));
            set(&mut cfg.stride, a.stride.map(Some));
            commands::eval_ppl(cfg, &config::resolve_out_dir(cli.out_dir, loaded.out_dir))
        }
        Command::EvalPasskey(a) => {
            let loaded = config::load::<config::EvalPasskeyConfig>(file)?;
            let mut cfg = loaded.params;
            set(&mut cfg.checkpoint, a.checkpoint.map(Some));
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.extended_window, a.extended_window.map(Some));
            set(&mut cfg.trials, a.trials);
            commands::eval_passkey(cfg, &config::resolve_out_dir(cli.out_dir, loaded.out_dir))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                CliError::Args(String::new()).exit_code()
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
