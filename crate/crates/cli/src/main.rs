use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use drpi::harness::plot::emit_svg_curves;
use drpi::harness::verify::{run_suite, Suite};
use drpi::harness::{run_experiment, EnvSpec, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "drpi",
    version,
    about = "Distributionally robust policy iteration experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an MDP from an environment spec (JSON) and write it as JSON.
    GenEnv {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment config; writes run.csv, summary.json, curves.svg.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot columns of a run CSV as an SVG line chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// Comma-separated column names.
        #[arg(long, value_delimiter = ',', required = true)]
        cols: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Linear instead of logarithmic y axis.
        #[arg(long)]
        linear: bool,
    },
    /// Cross-check the solvers against the oracles.
    Verify {
        #[arg(long)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenEnv { spec, out } => {
            let text =
                fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: EnvSpec = serde_json::from_str(&text).context("parsing environment spec")?;
            let env = spec.build()?;
            fs::write(&out, env.mdp.to_json()?)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} ({} states, {} actions)",
                out.display(),
                env.mdp.n_states(),
                env.mdp.n_actions()
            );
            Ok(true)
        }
        Command::Run { config, out } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .context("no output directory: pass --out or set output_dir")?;
            let outcome = run_experiment(&cfg, &out)?;
            let s = &outcome.summary;
            println!(
                "{} iterations, final sup loss {:.3e}, min safety margin {:.3e}, E_N {:.3e}",
                s.iterations, s.final_sup_loss, s.safety_margin_min, s.e_n
            );
            println!(
                "rollouts: return {:.3} +- {:.3}, length {:.2}, trap entries {}/{}",
                s.evaluation.mean_return,
                s.evaluation.std_return,
                s.evaluation.mean_length,
                s.evaluation.trap_entries,
                s.evaluation.episodes
            );
            println!("artifacts in {}", out.display());
            Ok(true)
        }
        Command::Plot {
            csv,
            cols,
            out,
            linear,
        } => {
            let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
            emit_svg_curves(&csv, &cols, &out, !linear)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Verify { suite, seed } => {
            let report = run_suite(suite, seed)?;
            print!("{report}");
            Ok(report.all_passed())
        }
    }
}
