use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pathbismut_cli::commands;
use pathbismut_cli::{CliError, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "pathbismut",
    version,
    about = "Bismut-type derivative estimators for path-dependent McKean-Vlasov SDEs"
)]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "PATHBISMUT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the particle system and write `paths.bin`.
    Simulate(RunArgs),
    /// Run the configured estimator and oracles.
    Estimate(RunArgs),
    /// Run one of the verification checks.
    Verify {
        kind: VerifyKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run every `*.toml` in a directory and write `summary.csv`.
    Suite {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyKind {
    Ibp,
    ChainRule,
    Decay,
    Picard,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output` or `out/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(Experiment, PathBuf), CliError> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        let out = match (&self.out, &config.output) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => PathBuf::from(o),
            (None, None) => Path::new("out").join(&config.name),
        };
        Ok((Experiment::from_config(config)?, out))
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate(args) => {
            let (exp, out) = args.load()?;
            print_json(&commands::simulate_cmd(&exp, &out)?)?;
            Ok(true)
        }
        Command::Estimate(args) => {
            let (exp, out) = args.load()?;
            let (est, oracle) = commands::run_experiment(&exp, &out)?;
            print_json(&est)?;
            if let Some(o) = &oracle {
                print_json(o)?;
            }
            Ok(oracle.is_none_or(|o| o.pass))
        }
        Command::Verify { kind, run } => {
            let (exp, out) = run.load()?;
            match kind {
                VerifyKind::Ibp => {
                    let r = commands::verify_ibp_cmd(&exp, &out)?;
                    print_json(&r)?;
                    Ok(r.pass)
                }
                VerifyKind::ChainRule => {
                    let r = commands::verify_chain_rule_cmd(&exp, &out)?;
                    print_json(&r)?;
                    Ok(r.pass)
                }
                VerifyKind::Decay => {
                    let r = commands::verify_decay_cmd(&exp, &out)?;
                    print_json(&r)?;
                    Ok(r.all_negative && r.decreasing_in_lambda)
                }
                VerifyKind::Picard => {
                    let r = commands::verify_picard_cmd(&exp, &out)?;
                    print_json(&r)?;
                    Ok(r.converged)
                }
            }
        }
        Command::Suite { dir, out, seed } => {
            let rows = commands::run_suite(&dir, &out, seed, |name, result| match result {
                Ok(()) => eprintln!("{name}: ok"),
                Err(e) => eprintln!("{name}: {e}"),
            })?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            eprintln!(
                "{} configs, {failed} failed; summary in {}",
                rows.len(),
                out.join("summary.csv").display()
            );
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
