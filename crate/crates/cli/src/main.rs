use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use ndgauss_cli::commands::bench::{run_bench, BenchArgs};
use ndgauss_cli::commands::eval::{run_eval, EvalArgs, GridSpec, QuerySource};
use ndgauss_cli::commands::fit::{run_fit, FitArgs};
use ndgauss_cli::commands::gradcheck::{format_report, run_gradcheck, GradcheckArgs};
use ndgauss_cli::CliError;

/// Fit, evaluate and benchmark mixtures of N-dimensional Gaussians.
#[derive(Parser, Debug)]
#[command(name = "ndg", version)]
struct Cli {
    /// Seed overriding the one in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a mixture on the dataset named in the config.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint at a query file or an image slice.
    #[command(group(ArgGroup::new("source").required(true).args(["queries", "grid"])))]
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Tensor file whose queries are evaluated.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Image slice, `WxH@A,B[:V0,...]`.
        #[arg(long)]
        grid: Option<GridSpec>,
        #[arg(long)]
        out: PathBuf,
        /// Tensor file with reference targets for error metrics.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        no_cull: bool,
    },
    /// Sweep culling settings against brute-force evaluation.
    BenchCull {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_scale: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit { config, out, resume } => {
            let outcome = run_fit(&FitArgs {
                config,
                out,
                resume,
                seed: cli.seed,
            })?;
            println!(
                "finished at iteration {} with {} components (best validation {:.4e})",
                outcome.state.iteration,
                outcome.state.mixture.len(),
                outcome.state.best_validation
            );
        }
        Command::Eval {
            ckpt,
            queries,
            grid,
            out,
            reference,
            no_cull,
        } => {
            let source = match (queries, grid) {
                (Some(p), _) => QuerySource::File(p),
                (None, Some(g)) => QuerySource::Grid(g),
                (None, None) => unreachable!("clap requires a query source"),
            };
            let report = run_eval(&EvalArgs {
                ckpt,
                source,
                out,
                reference,
                no_cull,
                seed: cli.seed,
            })?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::BenchCull { config, out } => {
            let rows = run_bench(&BenchArgs { config, out: out.clone(), seed: cli.seed })?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Gradcheck { corrupt_scale } => {
            let report = run_gradcheck(&GradcheckArgs {
                seed: cli.seed,
                corrupt_scale,
            })?;
            let text = format_report(&report);
            if !report.passed() {
                return Err(CliError::CheckFailed(text.trim_end().to_string()));
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(threads) = std::env::var("NDG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.into()
        }
    }
}
