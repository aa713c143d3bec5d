use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use multicoding::compilers::calibrate_eta;
use multicoding_cli::{cmd_metrics, cmd_run, cmd_sweep, with_output, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "multicoding", version, about = "Run noise-robust protocol compilers against adversarial channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print graph parameters as JSON.
    Metrics {
        #[arg(long)]
        graph: String,
        /// Seed for random graph generators.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run trials and emit JSON lines.
    Run(Common),
    /// Run trials over a grid of rates and emit CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rates.
        #[arg(long)]
        rates: Option<String>,
    },
    /// Estimate the RS round-error constant from forced-failure runs.
    CalibrateEta {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Random-noise runs per instance and rate.
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Plain-text `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: Option<String>,
    /// rs, undirected, med, gv, magi or none.
    #[arg(long)]
    compiler: Option<String>,
    /// null, random, cut-blocker, star, walk or alt-reality.
    #[arg(long)]
    adversary: Option<String>,
    /// global or per-edge.
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    rate: Option<String>,
    /// Rounds of the protocol being compiled.
    #[arg(long = "T")]
    rounds: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Directory for per-trial instrumentation CSVs (RS-based compilers).
    #[arg(long)]
    instrument: Option<String>,
}

impl Common {
    fn config(&self, extra: &[(&str, Option<&String>)]) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        let flags = [
            ("graph", self.graph.as_ref()),
            ("compiler", self.compiler.as_ref()),
            ("adversary", self.adversary.as_ref()),
            ("budget", self.budget.as_ref()),
            ("rate", self.rate.as_ref()),
            ("T", self.rounds.as_ref()),
            ("trials", self.trials.as_ref()),
            ("seed", self.seed.as_ref()),
            ("out", self.out.as_ref()),
            ("instrument", self.instrument.as_ref()),
        ];
        for (k, v) in flags.iter().chain(extra) {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Metrics { graph, seed } => {
            let report = cmd_metrics(&graph, seed)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Run(common) => {
            let cfg = common.config(&[])?;
            let summary = with_output(cfg.out.as_deref(), |w| cmd_run(&cfg, w))?;
            if cfg.out.is_some() {
                eprintln!("{}/{} trials succeeded", summary.successes, summary.trials);
            }
        }
        Command::Sweep { common, rates } => {
            let cfg = common.config(&[("rates", rates.as_ref())])?;
            with_output(cfg.out.as_deref(), |w| cmd_sweep(&cfg, w))?;
        }
        Command::CalibrateEta { seed, runs } => {
            let cal = calibrate_eta(seed, runs)?;
            println!("{}", serde_json::to_string(&cal)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
