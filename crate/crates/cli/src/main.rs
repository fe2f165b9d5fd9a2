use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparsedom_cli::battery::run_suite;
use sparsedom_cli::config::{ExperimentConfig, ExperimentKind};
use sparsedom_cli::report::{run, write_report, RunError};

#[derive(Parser)]
#[command(
    name = "sparsedom",
    version,
    about = "Numerical experiments on sparse domination of bilinear singular forms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, env = "SPARSEDOM_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a positive sparse form on given cubes.
    Psf(Common),
    /// Build sparse collections and check their invariants.
    SparseBuild(Common),
    /// Ratio of the truncated form to its dominating sparse form.
    Dominate(Common),
    /// Ratios in the localized single-scale estimate.
    AssumptionL(Common),
    /// Weighted norm inequality experiments.
    Weights(Common),
    /// Operator-norm decay of Littlewood-Paley kernel pieces.
    LpDecay(Common),
    /// Calderón-Zygmund decomposition checks.
    CzProps(Common),
    /// Run the full acceptance battery.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Run only these criteria.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<u8>>,
    },
}

fn fail(e: &RunError) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::to_string_pretty(&e.block()).expect("error block serializes")
    );
    ExitCode::from(e.exit_code() as u8)
}

fn set_threads(n: Option<usize>) -> Result<(), RunError> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunError::Failed(e.into()))?;
    }
    Ok(())
}

fn experiment(kind: ExperimentKind, c: Common) -> Result<(), RunError> {
    set_threads(c.threads)?;
    let mut config = match &c.config {
        Some(path) => ExperimentConfig::load(path).map_err(RunError::Failed)?,
        None => ExperimentConfig::new(kind),
    };
    if config.kind != kind {
        return Err(RunError::Invalid(vec![format!(
            "config kind {} does not match subcommand {}",
            config.kind.name(),
            kind.name()
        )]));
    }
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    let dir = c
        .out
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let report = run(&config)?;
    write_report(&report, &dir, config.output.csv).map_err(RunError::Failed)?;
    println!("{}", dir.join("report.json").display());
    Ok(())
}

fn suite(c: Common, only: Option<Vec<u8>>) -> Result<bool, RunError> {
    set_threads(c.threads)?;
    if c.config.is_some() {
        return Err(RunError::Invalid(vec![
            "the suite takes no config file".into()
        ]));
    }
    let report = run_suite(c.seed.unwrap_or(0), only.as_deref());
    for (o, t) in report.payload.outcomes.iter().zip(&report.timings) {
        let ok = o.passed && t.within_limit;
        println!(
            "criterion {:>2} {:<45} {} ({:.2} s)",
            o.id,
            o.name,
            if ok { "PASS" } else { "FAIL" },
            t.seconds
        );
    }
    let dir = c.out.unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| RunError::Failed(e.into()))?;
    let text = serde_json::to_string_pretty(&report).expect("suite report serializes") + "\n";
    std::fs::write(dir.join("report.json"), text).map_err(|e| RunError::Failed(e.into()))?;
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Psf(c) => experiment(ExperimentKind::Psf, c),
        Command::SparseBuild(c) => experiment(ExperimentKind::SparseBuild, c),
        Command::Dominate(c) => experiment(ExperimentKind::Dominate, c),
        Command::AssumptionL(c) => experiment(ExperimentKind::AssumptionL, c),
        Command::Weights(c) => experiment(ExperimentKind::Weights, c),
        Command::LpDecay(c) => experiment(ExperimentKind::LpDecay, c),
        Command::CzProps(c) => experiment(ExperimentKind::CzProps, c),
        Command::Suite { common, only } => match suite(common, only) {
            Ok(true) => return ExitCode::SUCCESS,
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
