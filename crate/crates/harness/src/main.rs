use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use exitsteal::config::ExperimentConfig;
use exitsteal::error::{HarnessError, Result};
use exitsteal::experiment::{run_experiment, summary_csv, Run, RunSummary, Variant};

#[derive(Parser)]
#[command(name = "exitsteal", version, about = "Extract multi-exit networks through a timed black-box API")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Offset applied to every seed stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Ours,
    Baseline,
    NoStrategyLoss,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyMode {
    Search,
    Traditional,
}

#[derive(Subcommand)]
enum Command {
    /// Train the victim network.
    TrainVictim,
    /// Fix the victim's output strategy and timing model.
    Deploy,
    /// Assemble the attacker's query set.
    Query,
    /// Query the victim, time it, and estimate exit labels.
    EstimateExits,
    /// Train a substitute network.
    TrainSubstitute {
        #[arg(long, value_enum, default_value = "ours")]
        mode: TrainMode,
    },
    /// Choose a substitute output strategy.
    SearchStrategy {
        #[arg(long, value_enum, default_value = "search")]
        mode: StrategyMode,
    },
    /// Evaluate every variant on the test set.
    Evaluate,
    /// Run all stages, reusing existing artifacts.
    RunExperiment,
    /// Print the summary of a finished run.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = cfg.seeds.offset(s);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let path = cli.config.clone().unwrap_or_else(|| PathBuf::from("<defaults>"));
    cfg.validate().map_err(|message| HarnessError::Config { path, message })?;
    Ok(cfg)
}

fn print_summary(s: &RunSummary) {
    print!("{}", summary_csv(s));
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let dir = cfg.out_dir.clone();
    if let Command::RunExperiment = cli.command {
        print_summary(&run_experiment(&cfg, &dir)?);
        return Ok(());
    }
    if let Command::Report = cli.command {
        let path = dir.join("report.json");
        if !path.exists() {
            return Err(HarnessError::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::Io { path, source: e })?;
        print_summary(&serde_json::from_str(&text)?);
        return Ok(());
    }
    let mut run = Run::new(cfg, dir)?;
    match cli.command {
        Command::TrainVictim => run.train_victim(),
        Command::Deploy => run.deploy(),
        Command::Query => run.build_queries(),
        Command::EstimateExits => run.estimate_exits(),
        Command::TrainSubstitute { mode } => run.train_network(match mode {
            TrainMode::Ours => "ours",
            TrainMode::Baseline => "baseline",
            TrainMode::NoStrategyLoss => "no_strategy_loss",
        }),
        Command::SearchStrategy { mode } => match mode {
            StrategyMode::Search => run.select_strategy(Variant::Ours),
            StrategyMode::Traditional => run.select_strategy(Variant::Baseline),
        },
        Command::Evaluate => run.evaluate().map(|s| print_summary(&s)),
        Command::RunExperiment | Command::Report => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
