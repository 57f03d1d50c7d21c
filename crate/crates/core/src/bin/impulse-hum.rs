use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use impulse_hum::config::{ExperimentConfig, Problem};
use impulse_hum::dynamics::{ControlClass, Convention};
use impulse_hum::error::Error;
use impulse_hum::runner::{run, write_outputs};

#[derive(Parser)]
#[command(name = "impulse-hum", version, about = "Impulse control of a stochastic heat equation on a Bernoulli tree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON); the built-in default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    convention: Option<ConventionArg>,
    #[arg(long, global = true, value_enum)]
    class: Option<ClassArg>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Forward run, free or with `parameters.control`
    Simulate,
    /// HUM synthesis with its certificate
    Hum,
    /// Minimal-norm control reaching the target ball
    NormOpt,
    /// Earliest horizon reachable within the norm bound
    TimeOpt,
    /// Duality, decay, spectral and observability checks plus a HUM run
    Verify,
    /// HUM over `parameters.epsilons` and the cost-scaling fit
    Sweep,
}

#[derive(ValueEnum, Clone, Copy)]
enum ConventionArg {
    Adjoint,
    PaperReversed,
}

#[derive(ValueEnum, Clone, Copy)]
enum ClassArg {
    AtImpulse,
    PaperRestricted,
}

fn problem(c: Command) -> Problem {
    match c {
        Command::Simulate => Problem::Simulate,
        Command::Hum => Problem::Hum,
        Command::NormOpt => Problem::NormOpt,
        Command::TimeOpt => Problem::TimeOpt,
        Command::Verify => Problem::Verify,
        Command::Sweep => Problem::Sweep,
    }
}

fn report(e: &Error) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": { "code": e.code(), "message": e.to_string() } }));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report(&Error::Config(e.to_string()));
        }
    }
    let mut cfg = match &cli.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => return report(&e),
        },
        None => ExperimentConfig::default(),
    };
    cfg.problem = Some(problem(cli.command));
    if let Some(c) = cli.convention {
        cfg.parameters.convention = match c {
            ConventionArg::Adjoint => Convention::Adjoint,
            ConventionArg::PaperReversed => Convention::PaperReversed,
        };
    }
    if let Some(c) = cli.class {
        cfg.parameters.class = match c {
            ClassArg::AtImpulse => ControlClass::AtImpulse,
            ClassArg::PaperRestricted => ControlClass::PaperRestricted,
        };
    }
    if let Some(dir) = &cli.out {
        cfg.output_dir = dir.to_string_lossy().into_owned();
    }
    let out = match run(&cfg) {
        Ok(o) => o,
        Err(e) => return report(&e),
    };
    if let Err(e) = write_outputs(&cfg, &out, &PathBuf::from(&cfg.output_dir)) {
        return report(&e);
    }
    for c in &out.contracts {
        println!("{:<6} {} = {:e} (tolerance {:e})", if c.passed { "ok" } else { "FAILED" }, c.name, c.value.0, c.tolerance.0);
    }
    let failed = out.failed();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        let names: Vec<&str> = failed.iter().map(|c| c.name.as_str()).collect();
        eprintln!("{}", serde_json::json!({ "failed_contracts": names }));
        ExitCode::from(1)
    }
}
