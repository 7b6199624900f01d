use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jps_core::harness::{
    cmd_ablate, cmd_diagnose, cmd_gradcheck, cmd_select, cmd_train, ExperimentConfig, SelectArgs,
    DEFAULT_RHO_GRID,
};
use jps_core::selection::SelectorKind;
use jps_core::{ErrorClass, JpsError};

#[derive(Parser)]
#[command(name = "jps", version, about = "Joint parameter selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of the model's analytic gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt one analytic gradient entry (negative control).
        #[arg(long, hide = true)]
        sabotage: bool,
    },
    /// Build a parameter mask for one held-out target domain.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        selector: Option<SelectorKind>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long = "L")]
        l: Option<usize>,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-domain-out fine-tuning; with --mask, only that mask's cell.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Sweep rho x selectors x seeds x targets.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        rho_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        selectors: Option<Vec<SelectorKind>>,
    },
    /// Bound terms, mask statistics and ranks for a mask file.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, JpsError> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| match e {
        JpsError::Io(io) => JpsError::Config(format!("{}: {io}", common.config.display())),
        other => other,
    })?;
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<(), JpsError> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), JpsError> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))
}

fn run(cli: Cli) -> Result<ExitCode, JpsError> {
    match cli.command {
        Command::Gradcheck { common, sabotage } => {
            let cfg = load(&common)?;
            let out = cmd_gradcheck(&cfg, sabotage)?;
            print_json(&out.report)?;
            if !out.report.passed {
                eprintln!(
                    "gradient check failed: max relative error {:e} at {}[{}]",
                    out.report.max_rel_err, out.report.worst_param_id, out.report.worst_index
                );
                return Ok(ExitCode::from(ErrorClass::Numeric.exit_code()));
            }
        }
        Command::Select {
            common,
            selector,
            rho,
            l,
            target,
            seed,
            out,
        } => {
            let cfg = load(&common)?;
            let args = SelectArgs {
                selector,
                rho,
                l,
                target,
                seed,
                out,
            };
            let (path, file) = cmd_select(&cfg, &args)?;
            emit(&format!(
                "{}: {} of {} coordinates ({})\n",
                path.display(),
                file.selected.len(),
                file.num_eligible,
                file.selector_kind
            ))?;
        }
        Command::Train { common, mask } => {
            let cfg = load(&common)?;
            let report = cmd_train(&cfg, mask.as_deref())?;
            print_json(&report.aggregate)?;
        }
        Command::Ablate {
            common,
            rho_grid,
            selectors,
        } => {
            let cfg = load(&common)?;
            let grid = rho_grid.unwrap_or_else(|| DEFAULT_RHO_GRID.to_vec());
            let sels = selectors.unwrap_or_else(|| {
                vec![
                    SelectorKind::Jps,
                    SelectorKind::WithoutVariance,
                    SelectorKind::Direct,
                ]
            });
            let report = cmd_ablate(&cfg, &grid, &sels)?;
            emit(&report.to_csv()?)?;
        }
        Command::Diagnose { common, mask } => {
            let cfg = load(&common)?;
            let report = cmd_diagnose(&cfg, &mask)?;
            print_json(&report.bound_terms)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
