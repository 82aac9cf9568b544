use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use friendsim::circuit::render_view;
use friendsim::harness::{self, ExperimentRef, HarnessError, Mode, PolicyRef, RunConfig, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "friendsim", version, about = "Run, replay and draw observer-inclusive quantum thought experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment and write a report.
    Run {
        /// TOML run config; flags given alongside override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// wigner, deutsch, fr or a path to a script (.toml).
        #[arg(long)]
        experiment: Option<String>,
        /// unitary, collapse, objective-cut, subjective or hadamard.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        runs: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// e.g. "u=ok,w=ok"
        #[arg(long)]
        postselect: Option<String>,
        /// sample, exact or matrix.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Re-execute one run of a sampled report and print its trace.
    Replay {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        run: u64,
        /// Must match the report's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print an agent's circuit view as a text diagram.
    Render {
        #[arg(long, default_value = "fr")]
        experiment: String,
        /// Agent name (case-insensitive); all views if omitted.
        #[arg(long)]
        view: Option<String>,
    },
    /// Print a built-in experiment as a TOML script.
    Script {
        #[arg(long)]
        experiment: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<HarnessError>().is_some_and(|h| matches!(h, HarnessError::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run { config, experiment, policy, runs, seed, postselect, mode, out } => {
            let (mut cfg, base) = match &config {
                Some(path) => RunConfig::from_path(path)?,
                None => {
                    let name = experiment.as_deref().ok_or_else(|| HarnessError::Config("either --config or --experiment is required".into()))?;
                    (RunConfig::new(name, "unitary"), None)
                }
            };
            if let Some(e) = experiment {
                cfg.experiment = ExperimentRef::parse(&e);
            }
            if let Some(p) = policy {
                cfg.policy = PolicyRef::Named(p);
            }
            if let Some(r) = runs {
                if r == 0 {
                    return Err(HarnessError::Config("runs: must be at least 1".into()).into());
                }
                cfg.runs = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if postselect.is_some() {
                cfg.postselect = postselect;
            }
            if let Some(m) = mode {
                cfg.mode = m.parse::<Mode>()?;
            }
            let report = harness::run_with_base(&cfg, base.as_deref())?;
            let (json, text) = harness::write_report(&report, &out)?;
            println!("report: {}", json.display());
            println!("summary: {}", text.display());
            println!("schema: {SCHEMA_VERSION}");
            print!("{}", report.summary());
            Ok(())
        }
        Command::Replay { report, run, seed } => {
            let r = harness::read_report(&report)?;
            let trace = harness::replay(&r, run, seed)?;
            println!("run {run} of {} (seed {}, stream {run})", report.display(), r.config.seed);
            print!("{}", trace.render());
            Ok(())
        }
        Command::Render { experiment, view } => {
            let script = ExperimentRef::parse(&experiment).load(None)?;
            let views: Vec<_> = match &view {
                Some(v) => vec![script
                    .views
                    .iter()
                    .find(|x| x.agent.eq_ignore_ascii_case(v))
                    .ok_or_else(|| anyhow!("{} has no view for `{v}`", script.name))?],
                None => script.views.iter().collect(),
            };
            for v in views {
                println!("{}:", v.agent);
                print!("{}", render_view(v));
            }
            Ok(())
        }
        Command::Script { experiment } => {
            let script = ExperimentRef::parse(&experiment).load(None).context("loading experiment")?;
            print!("{}", script.to_toml());
            Ok(())
        }
    }
}
