use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flipflop_cli::config::{resolve_run_dir, ExperimentConfig, Overrides, OUTPUT_ROOT_ENV};
use flipflop_cli::pipeline::{self, Run, Subject};
use flipflop_cli::{report, CliError};
use flipflop_core::datagen::Task;
use flipflop_core::probes::Policy;

#[derive(Parser)]
#[command(name = "undo-ff", version, about = "Train and probe small selective state space models on UNDO Flip-Flop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Standard,
    Undo,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    layers: Option<usize>,
    /// Run directory. Without it the run goes to <output root>/<run name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output root override.
    #[arg(long, env = OUTPUT_ROOT_ENV, hide_env_values = true)]
    output_root: Option<String>,
}

#[derive(Args, Clone)]
struct SubjectArgs {
    /// Reference policy instead of a checkpoint: oracle, toggle, constant0, constant1, random, random:<seed>.
    #[arg(long, conflicts_with = "checkpoint")]
    policy: Option<String>,
    /// Checkpoint to load; defaults to the run's final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train, ID-test and OOD-test splits.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Also write the pressure set.
        #[arg(long)]
        pressure: bool,
    },
    /// Train on a generated run directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// ID and OOD exact match.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArgs,
    },
    /// Pressure test with the toggle and history ablations.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArgs,
    },
    /// generate, train, eval and probe in one go.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Results table over finished runs.
    Report {
        /// Run directories, or directories containing runs.
        runs: Vec<PathBuf>,
        /// Directory for report.md, report.csv and the comparison chart.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default config as TOML.
    DefaultConfig,
}

fn build_run(c: &Common) -> Result<Run, CliError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        task: c.task.map(|t| match t {
            TaskArg::Standard => Task::Standard,
            TaskArg::Undo => Task::Undo,
        }),
        layers: c.layers,
    });
    let dir = resolve_run_dir(&cfg, c.out.as_deref(), c.output_root.as_deref());
    Run::new(cfg, dir)
}

fn subject(run: &Run, s: &SubjectArgs) -> Result<Subject, CliError> {
    if let Some(name) = &s.policy {
        let p = Policy::parse(name).ok_or_else(|| CliError::Config(format!("unknown policy {name:?}")))?;
        return Ok(Subject::Policy(p));
    }
    Ok(match &s.checkpoint {
        Some(p) => Subject::Checkpoint(p.clone()),
        None => Subject::default_for(run),
    })
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, pressure } => {
            let run = build_run(&common)?;
            let s = pipeline::cmd_generate(&run, pressure)?;
            println!("{}", run.dir.display());
            println!("{}", pretty(&s));
        }
        Command::Train { common } => {
            let run = build_run(&common)?;
            let s = pipeline::cmd_train(&run)?;
            println!("{}", pretty(&s));
        }
        Command::Eval { common, subject: sa } => {
            let run = build_run(&common)?;
            let b = pipeline::cmd_eval(&run, &subject(&run, &sa)?)?;
            println!(
                "{}: train {:.4} ID {:.4} OOD {:.4}",
                b.predictor, b.train.exact_match, b.id.exact_match, b.ood.exact_match
            );
        }
        Command::Probe { common, subject: sa } => {
            let run = build_run(&common)?;
            let r = pipeline::cmd_probe(&run, &subject(&run, &sa)?)?;
            println!("{}", pretty(&r));
        }
        Command::Run { common } => {
            let run = build_run(&common)?;
            let r = pipeline::cmd_run(&run)?;
            println!("{}", run.dir.display());
            println!(
                "epochs {} converged {} ID {:.4} OOD {:.4} pressure {:.4} toggle {:?} history {:?}",
                r.train.epochs,
                r.train.converged,
                r.eval.id.exact_match,
                r.eval.ood.exact_match,
                r.probe.pressure_accuracy,
                r.probe.toggle_rate,
                r.probe.history_loss_rate
            );
        }
        Command::Report { runs, out } => {
            let table = report::cmd_report(&runs, out.as_deref())?;
            print!("{}", table.to_markdown());
            for m in &table.missing {
                eprintln!("warning: no readable manifest in {}", m.display());
            }
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
